use super::{check_axis, numel, Tensor};
use crate::error::{shape_err, Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat source offsets of a permuted copy, in output order.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let ps: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = numel(shape);
    let mut idx = Vec::with_capacity(n);
    let rank = shape.len();
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += ps[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= ps[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    idx
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err!("invalid permutation {:?} for rank {}", axes, rank));
        }
        let idx = permute_index(self.shape(), axes);
        let d = self.data();
        let data = idx.iter().map(|&i| d[i]).collect();
        let out_shape = axes.iter().map(|&a| self.shape()[a]).collect();
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; idx.len()];
            for (o, &i) in idx.iter().enumerate() {
                g[i] = ctx.grad[o];
            }
            vec![Some(g)]
        }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let shape = self.shape();
        if start + len > shape[axis] {
            return Err(shape_err!("narrow {}..{} exceeds extent {} on axis {}", start, start + len, shape[axis], axis));
        }
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n_in = self.numel();
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; n_in];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                g[base..base + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        }))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        check_axis(axis, first.rank())?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!("concat shape mismatch {:?} vs {:?}", p.shape(), first.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        Ok(Tensor::from_op(out_shape, data, parts.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().zip(ctx.needs).map(|(g, &n)| n.then_some(g)).collect()
        }))
    }

    /// Selects entries along `axis` by index (repeats allowed); backward
    /// scatter-adds.
    pub fn index_select(&self, axis: usize, index: &[usize]) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let shape = self.shape();
        let full = shape[axis];
        if let Some(&bad) = index.iter().find(|&&i| i >= full) {
            return Err(shape_err!("index {} out of range for extent {}", bad, full));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * full + i) * inner;
                data.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = index.len();
        let index = index.to_vec();
        let n_in = self.numel();
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; n_in];
            let mut off = 0;
            for o in 0..outer {
                for &i in &index {
                    let base = (o * full + i) * inner;
                    for (gv, &s) in g[base..base + inner].iter_mut().zip(&ctx.grad[off..off + inner]) {
                        *gv += s;
                    }
                    off += inner;
                }
            }
            vec![Some(g)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn ramp(shape: &[usize]) -> Tensor {
        Tensor::new(shape, (0..numel(shape)).map(|i| i as f64 * 0.37 - 1.1).collect()).unwrap()
    }

    #[test]
    fn permute_2d_is_transpose() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let x = ramp(&[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());
    }

    #[test]
    fn narrow_concat_inverse() {
        let x = ramp(&[2, 5, 3]);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        let y = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(x.to_vec(), y.to_vec());
        assert!(x.narrow(1, 4, 2).is_err());
    }

    #[test]
    fn shape_op_gradients() {
        let x = ramp(&[2, 3, 4]);
        let err = check_gradients(&[x.clone()], |xs| {
            let p = xs[0].permute(&[1, 2, 0])?;
            let n = p.narrow(1, 1, 2)?;
            let c = Tensor::concat(&[n.clone(), n.square()], 2)?;
            let s = c.index_select(0, &[2, 0, 2])?;
            Ok(s.reshape(&[s.numel()])?.square().sum())
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
