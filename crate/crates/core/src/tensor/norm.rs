use super::{check_axis, Tensor};
use crate::error::{shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Per-channel statistics for inference-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Normalizes groups of `len` values laid out with stride `inner`.
/// Returns normalized values and the per-group inverse std.
fn normalize_groups(d: &[f64], outer: usize, len: usize, inner: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; d.len()];
    let mut inv = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mean = (0..len).map(|k| d[at(k)]).sum::<f64>() / len as f64;
            let var = (0..len).map(|k| (d[at(k)] - mean).powi(2)).sum::<f64>() / len as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv[o * inner + i] = r;
            for k in 0..len {
                out[at(k)] = (d[at(k)] - mean) * r;
            }
        }
    }
    (out, inv)
}

fn normalize_groups_backward(y: &[f64], g: &[f64], inv: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    let n = len as f64;
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mg = (0..len).map(|k| g[at(k)]).sum::<f64>() / n;
            let mgy = (0..len).map(|k| g[at(k)] * y[at(k)]).sum::<f64>() / n;
            let r = inv[o * inner + i];
            for k in 0..len {
                dx[at(k)] = r * (g[at(k)] - mg - y[at(k)] * mgy);
            }
        }
    }
    dx
}

impl Tensor {
    /// Zero-mean, unit-variance normalization along `axis` (no affine).
    pub fn layer_norm(&self, axis: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let s = self.shape();
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let (out, inv) = normalize_groups(self.data(), outer, len, inner, LAYER_NORM_EPS);
        Ok(Tensor::from_op(s.to_vec(), out, vec![self.clone()], move |ctx| {
            vec![Some(normalize_groups_backward(ctx.out, ctx.grad, &inv, outer, len, inner))]
        }))
    }

    /// Layer norm over the last axis followed by a per-feature affine map.
    pub fn layer_norm_affine(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(shape_err!("layer norm on a scalar"));
        }
        self.layer_norm(self.rank() - 1)?.mul(gamma)?.add(beta)
    }

    /// Training-mode batch norm over every axis but the last (channels).
    /// Returns the normalized tensor and the biased batch statistics.
    pub fn batch_norm_train(&self) -> Result<(Tensor, BatchNormStats)> {
        let Some(&c) = self.shape().last() else {
            return Err(shape_err!("batch norm on a scalar"));
        };
        let m = self.numel() / c.max(1);
        let d = self.data();
        let (out, inv) = normalize_groups(d, 1, m, c, BATCH_NORM_EPS);
        let mut mean = vec![0.0; c];
        for r in 0..m {
            for (mv, v) in mean.iter_mut().zip(&d[r * c..(r + 1) * c]) {
                *mv += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let var = inv.iter().map(|r| 1.0 / (r * r) - BATCH_NORM_EPS).collect();
        let y = Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            vec![Some(normalize_groups_backward(ctx.out, ctx.grad, &inv, 1, m, c))]
        });
        Ok((y, BatchNormStats { mean, var }))
    }

    /// Inference-mode batch norm with fixed statistics over the last axis.
    pub fn batch_norm_infer(&self, stats: &BatchNormStats) -> Result<Tensor> {
        let c = stats.mean.len();
        if self.shape().last() != Some(&c) || stats.var.len() != c {
            return Err(shape_err!("batch norm stats for {} channels on {:?}", c, self.shape()));
        }
        let scale: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let out = self
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&stats.mean).zip(&scale).map(|((x, m), s)| (x - m) * s))
            .collect();
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |ctx| {
            let g = ctx.grad.chunks(c).flat_map(|row| row.iter().zip(&scale).map(|(g, s)| g * s)).collect();
            vec![Some(g)]
        }))
    }

    /// Mean over the spatial axes of a `[B, H, W, C]` tensor, giving `[B, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(shape_err!("global_avg_pool expects [B,H,W,C], got {:?}", s));
        }
        self.reshape(&[s[0], s[1] * s[2], s[3]])?.mean_axis(1)
    }

    /// Mean cross-entropy of `[B, K]` logits with label smoothing.
    pub fn cross_entropy(&self, labels: &[usize], smoothing: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err!("cross entropy of {:?} with {} labels", s, labels.len()));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err!("label {} out of range for {} classes", bad, k));
        }
        let d = self.data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        let off = smoothing / k as f64;
        let on = 1.0 - smoothing + off;
        for r in 0..b {
            let row = &d[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                let lp = row[j] - lse;
                probs[r * k + j] = lp.exp();
                let target = if j == labels[r] { on } else { off };
                loss -= target * lp;
            }
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        Ok(Tensor::from_op(vec![], vec![loss], vec![self.clone()], move |ctx| {
            let scale = ctx.grad[0] / b as f64;
            let mut g = probs.clone();
            for r in 0..b {
                for j in 0..k {
                    let target = if j == labels[r] { on } else { off };
                    g[r * k + j] = (g[r * k + j] - target) * scale;
                }
            }
            vec![Some(g)]
        }))
    }
}
