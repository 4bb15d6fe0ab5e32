//! 2-D convolution over channels-last `[B, H, W, C]` tensors.
//!
//! Weights are laid out `[kh, kw, cin / groups, cout]`.

use super::linalg::{gemm, Layout};
use super::Tensor;
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups }
    }

    pub fn out_size(&self, size: usize, kernel: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geom {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geom {
    /// Input pixel for output position and kernel tap, if inside the image.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        (iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w).then_some((iy as usize, ix as usize))
    }
}

/// Patch matrix for one group: rows are output pixels, columns (ky, kx, ci).
fn im2col(x: &[f64], g: &Geom, group: usize) -> Vec<f64> {
    let cg = g.cin / g.groups;
    let kcols = g.kh * g.kw * cg;
    let mut cols = vec![0.0; g.b * g.ho * g.wo * kcols];
    for bi in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((bi * g.ho + oy) * g.wo + ox) * kcols;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                            let src = ((bi * g.h + iy) * g.w + ix) * g.cin + group * cg;
                            let dst = row + (ky * g.kw + kx) * cg;
                            cols[dst..dst + cg].copy_from_slice(&x[src..src + cg]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &Geom, group: usize, dx: &mut [f64]) {
    let cg = g.cin / g.groups;
    let kcols = g.kh * g.kw * cg;
    for bi in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((bi * g.ho + oy) * g.wo + ox) * kcols;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                            let dst = ((bi * g.h + iy) * g.w + ix) * g.cin + group * cg;
                            let src = row + (ky * g.kw + kx) * cg;
                            for (d, s) in dx[dst..dst + cg].iter_mut().zip(&cols[src..src + cg]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight columns belonging to one group, as a `[kh*kw*cg, cout/groups]` matrix.
fn group_weight(w: &[f64], g: &Geom, group: usize) -> Vec<f64> {
    let og = g.cout / g.groups;
    if g.groups == 1 {
        return w.to_vec();
    }
    let rows = g.kh * g.kw * (g.cin / g.groups);
    let mut m = Vec::with_capacity(rows * og);
    for r in 0..rows {
        m.extend_from_slice(&w[r * g.cout + group * og..r * g.cout + (group + 1) * og]);
    }
    m
}

fn dense_forward(x: &[f64], w: &[f64], g: &Geom) -> Vec<f64> {
    let og = g.cout / g.groups;
    let kcols = g.kh * g.kw * (g.cin / g.groups);
    let rows = g.b * g.ho * g.wo;
    if g.groups == 1 {
        let cols = im2col(x, g, 0);
        let mut out = vec![0.0; rows * g.cout];
        gemm(rows, kcols, g.cout, &cols, Layout::Normal, w, Layout::Normal, &mut out);
        return out;
    }
    let mut out = vec![0.0; rows * g.cout];
    for group in 0..g.groups {
        let cols = im2col(x, g, group);
        let wg = group_weight(w, g, group);
        let mut part = vec![0.0; rows * og];
        gemm(rows, kcols, og, &cols, Layout::Normal, &wg, Layout::Normal, &mut part);
        for r in 0..rows {
            out[r * g.cout + group * og..r * g.cout + (group + 1) * og].copy_from_slice(&part[r * og..(r + 1) * og]);
        }
    }
    out
}

fn dense_backward(x: &[f64], w: &[f64], gout: &[f64], g: &Geom, need_x: bool, need_w: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let og = g.cout / g.groups;
    let kcols = g.kh * g.kw * (g.cin / g.groups);
    let rows = g.b * g.ho * g.wo;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    for group in 0..g.groups {
        let gpart: Vec<f64> = if g.groups == 1 {
            gout.to_vec()
        } else {
            (0..rows)
                .flat_map(|r| gout[r * g.cout + group * og..r * g.cout + (group + 1) * og].iter().copied())
                .collect()
        };
        if let Some(dw) = dw.as_mut() {
            let cols = im2col(x, g, group);
            let mut dwg = vec![0.0; kcols * og];
            gemm(kcols, rows, og, &cols, Layout::Transposed, &gpart, Layout::Normal, &mut dwg);
            for r in 0..kcols {
                for o in 0..og {
                    dw[r * g.cout + group * og + o] += dwg[r * og + o];
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let wg = group_weight(w, g, group);
            let mut dcols = vec![0.0; rows * kcols];
            gemm(rows, og, kcols, &gpart, Layout::Normal, &wg, Layout::Transposed, &mut dcols);
            col2im_add(&dcols, g, group, dx);
        }
    }
    (dx, dw)
}

fn depthwise_forward(x: &[f64], w: &[f64], g: &Geom) -> Vec<f64> {
    let c = g.cin;
    let mut out = vec![0.0; g.b * g.ho * g.wo * c];
    for bi in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((bi * g.ho + oy) * g.wo + ox) * c;
                let dst = &mut out[o..o + c];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                            let s = ((bi * g.h + iy) * g.w + ix) * c;
                            let wk = &w[(ky * g.kw + kx) * c..(ky * g.kw + kx + 1) * c];
                            for ((d, xv), wv) in dst.iter_mut().zip(&x[s..s + c]).zip(wk) {
                                *d += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(x: &[f64], w: &[f64], gout: &[f64], g: &Geom, need_x: bool, need_w: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let c = g.cin;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    for bi in 0..g.b {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((bi * g.ho + oy) * g.wo + ox) * c;
                let go = &gout[o..o + c];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                            let s = ((bi * g.h + iy) * g.w + ix) * c;
                            let k = (ky * g.kw + kx) * c;
                            if let Some(dx) = dx.as_mut() {
                                for ((d, gv), wv) in dx[s..s + c].iter_mut().zip(go).zip(&w[k..k + c]) {
                                    *d += gv * wv;
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                for ((d, gv), xv) in dw[k..k + c].iter_mut().zip(go).zip(&x[s..s + c]) {
                                    *d += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

impl Tensor {
    /// Channels-last convolution; `bias` has shape `[cout]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d expects [B,H,W,C] input and [kh,kw,cin/g,cout] weight, got {:?} and {:?}", xs, ws));
        }
        let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cg, cout) = (ws[0], ws[1], ws[2], ws[3]);
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cg * groups != cin {
            return Err(shape_err!("groups {} incompatible with cin {} / weight {:?}", groups, cin, ws));
        }
        let (Some(ho), Some(wo)) = (spec.out_size(h, kh), spec.out_size(w, kw)) else {
            return Err(shape_err!(
                "kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * spec.padding,
                w + 2 * spec.padding
            ));
        };
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(shape_err!("conv bias {:?} for {} output channels", bias.shape(), cout));
            }
        }
        let g = Geom { b, h, w, cin, kh, kw, cout, ho, wo, stride: spec.stride, pad: spec.padding, groups };
        let depthwise = groups == cin && cout == cin;
        let out = if depthwise {
            depthwise_forward(self.data(), weight.data(), &g)
        } else {
            dense_forward(self.data(), weight.data(), &g)
        };
        let (x, wt) = (self.clone(), weight.clone());
        let y = Tensor::from_op(vec![b, ho, wo, cout], out, vec![x.clone(), wt.clone()], move |ctx| {
            let (dx, dw) = if depthwise {
                depthwise_backward(x.data(), wt.data(), ctx.grad, &g, ctx.needs[0], ctx.needs[1])
            } else {
                dense_backward(x.data(), wt.data(), ctx.grad, &g, ctx.needs[0], ctx.needs[1])
            };
            vec![dx, dw]
        });
        match bias {
            Some(bias) => y.add(bias),
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

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Direct seven-loop convolution used as an oracle.
    fn naive(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Vec<f64> {
        let (b, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, cg, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let og = cout / spec.groups;
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        let mut out = vec![0.0; b * ho * wo * cout];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let grp = co / og;
                        let mut s = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..cg {
                                    let xv = x.data()[((bi * h + iy as usize) * wd + ix as usize) * cin + grp * cg + ci];
                                    let wv = w.data()[((ky * kw + kx) * cg + ci) * cout + co];
                                    s += xv * wv;
                                }
                            }
                        }
                        out[((bi * ho + oy) * wo + ox) * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(&[1, 3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = x.conv2d(&w, None, Conv2dSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn padded_ones() {
        let x = Tensor::ones(&[1, 2, 2, 1]);
        let w = Tensor::ones(&[3, 3, 1, 1]);
        let y = x.conv2d(&w, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.to_vec(), vec![4.0; 4]);
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = Tensor::ones(&[1, 2, 2, 1]);
        let w = Tensor::ones(&[3, 3, 1, 1]);
        assert!(matches!(x.conv2d(&w, None, Conv2dSpec::new(1, 0, 1)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn bad_groups() {
        let x = Tensor::ones(&[1, 4, 4, 3]);
        let w = Tensor::ones(&[3, 3, 1, 3]);
        assert!(x.conv2d(&w, None, Conv2dSpec::new(1, 1, 2)).is_err());
    }

    #[test]
    fn output_size_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, k, s, p) in [(7, 3, 2, 1), (8, 3, 2, 1), (5, 1, 1, 0), (9, 3, 1, 0)] {
            let x = rand_t(&mut rng, &[1, h, h, 2]);
            let w = rand_t(&mut rng, &[k, k, 2, 3]);
            let y = x.conv2d(&w, None, Conv2dSpec::new(s, p, 1)).unwrap();
            let o = (h + 2 * p - k) / s + 1;
            assert_eq!(y.shape(), &[1, o, o, 3]);
        }
    }

    #[test]
    fn matches_naive_for_all_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // dense, grouped, depthwise
        for (cin, cout, groups, stride) in [(3, 4, 1, 1), (4, 6, 2, 2), (5, 5, 5, 1), (4, 4, 4, 2)] {
            let x = rand_t(&mut rng, &[2, 5, 6, cin]);
            let w = rand_t(&mut rng, &[3, 3, cin / groups, cout]);
            let spec = Conv2dSpec::new(stride, 1, groups);
            let got = x.conv2d(&w, None, spec).unwrap();
            for (a, b) in got.data().iter().zip(naive(&x, &w, spec)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradcheck_dense_and_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (cin, cout, groups, stride) in [(2, 3, 1, 2), (3, 3, 3, 1), (4, 2, 2, 1)] {
            let x = rand_t(&mut rng, &[1, 4, 5, cin]);
            let w = rand_t(&mut rng, &[3, 3, cin / groups, cout]);
            let b = rand_t(&mut rng, &[cout]);
            let err = check_gradients(&[x, w, b], |t| {
                Ok(t[0].conv2d(&t[1], Some(&t[2]), Conv2dSpec::new(stride, 1, groups))?.square().sum())
            })
            .unwrap();
            assert!(err < 1e-4, "groups {groups}: {err}");
        }
    }
}
