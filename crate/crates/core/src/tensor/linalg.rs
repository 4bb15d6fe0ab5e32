use super::Tensor;
use crate::error::{shape_err, Result};

/// Layout of an operand handed to [`gemm`].
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `c += a · b` where `a` is m×k and `b` is k×n after applying the layouts.
/// Operands are stored row-major in their untransposed shapes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: slice lengths checked above match the strides described.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), Layout::Normal, other.data(), Layout::Normal, &mut out);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(vec![m, n], out, vec![a.clone(), b.clone()], move |ctx| {
            let ga = ctx.needs[0].then(|| {
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, ctx.grad, Layout::Normal, b.data(), Layout::Transposed, &mut g);
                g
            });
            let gb = ctx.needs[1].then(|| {
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, a.data(), Layout::Transposed, ctx.grad, Layout::Normal, &mut g);
                g
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x · w (+ b)` with `w` of shape `[in, out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let shape = self.shape();
        let Some(&last) = shape.last() else {
            return Err(shape_err!("linear on a scalar"));
        };
        if weight.rank() != 2 || weight.shape()[0] != last {
            return Err(shape_err!("linear weight {:?} for input {:?}", weight.shape(), shape));
        }
        let rows = self.numel() / last.max(1);
        let y = self.reshape(&[rows, last])?.matmul(weight)?;
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = weight.shape()[1];
        let y = y.reshape(&out_shape)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_m() {
        let i2 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(&[2, 3], vec![1.5, -2.0, 3.0, 4.0, 0.25, -6.0]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap().to_vec(), m.to_vec());
    }

    #[test]
    fn hand_product() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn inner_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut r = |n| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let a = Tensor::new(&[3, 4], r(12)).unwrap();
        let b = Tensor::new(&[4, 2], r(8)).unwrap();
        let err = check_gradients(&[a, b], |xs| Ok(xs[0].matmul(&xs[1])?.square().sum())).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn linear_on_batched_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut r = |n| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let x = Tensor::new(&[2, 3, 4], r(24)).unwrap();
        let w = Tensor::new(&[4, 5], r(20)).unwrap();
        let b = Tensor::new(&[5], r(5)).unwrap();
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        let err = check_gradients(&[x, w, b], |xs| Ok(xs[0].linear(&xs[1], Some(&xs[2]))?.square().sum())).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
