use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.999, 0.05)
    }
}

/// Only matrices and kernels are decayed; norms, biases, skips and the
/// state-decay logarithms are not.
pub fn decays(name: &str, t: &Tensor) -> bool {
    t.rank() >= 2 && !name.ends_with(".a_log")
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from the gradients accumulated on `store`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (bc1, bc2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut updates = vec![];
        for (name, p) in store.params() {
            let Some(g) = p.grad() else { continue };
            let Some(g) = g.as_ref() else { continue };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::Contract(format!("optimizer state for {name} has the wrong size")));
            }
            let wd = if decays(name, p) { self.weight_decay } else { 0.0 };
            let mut w = p.to_vec();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + self.eps) + wd * w[i]);
            }
            updates.push((name.clone(), w));
        }
        for (name, w) in updates {
            store.set(&name, w)?;
        }
        Ok(())
    }
}

/// Linear warm-up over the first `warmup_frac` of `total` steps, then cosine
/// decay to zero.
pub fn lr_at(step: u64, total: u64, base: f64, warmup_frac: f64) -> f64 {
    let warm = ((total as f64 * warmup_frac).ceil() as u64).min(total);
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = ((step - warm) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Init, ParamSpec};

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::init(&[ParamSpec::new("w", &[2], Init::Zeros)], 0).unwrap();
        let target = [1.5, -0.75];
        let mut opt = AdamW::default();
        let total = 2000;
        for step in 0..total {
            let w = store.get("w").unwrap().clone();
            let diff = w.sub(&Tensor::new(&[2], target.to_vec()).unwrap()).unwrap();
            let loss = diff.mul(&Tensor::new(&[2], vec![1.0, 10.0]).unwrap()).unwrap().mul(&diff).unwrap().sum();
            loss.backward().unwrap();
            opt.step(&mut store, lr_at(step, total, 0.01, 0.05)).unwrap();
        }
        let w = store.get("w").unwrap().to_vec();
        for (a, b) in w.iter().zip(target) {
            assert!((a - b).abs() < 1e-6, "{w:?}");
        }
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 100, 1.0, 0.05), 0.2);
        assert_eq!(lr_at(4, 100, 1.0, 0.05), 1.0);
        assert!((lr_at(5, 100, 1.0, 0.05) - 1.0).abs() < 1e-12);
        assert!(lr_at(99, 100, 1.0, 0.05) < 1e-3);
        let mut prev = f64::INFINITY;
        for s in 5..100 {
            let lr = lr_at(s, 100, 1.0, 0.05);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn decay_only_hits_matrices() {
        let specs = [
            ParamSpec::new("fc.weight", &[2, 2], Init::Ones),
            ParamSpec::new("fc.bias", &[2], Init::Ones),
            ParamSpec::new("x.ssm.a_log", &[2, 2], Init::Ones),
        ];
        let mut store = ParamStore::init(&specs, 0).unwrap();
        for (_, p) in store.params() {
            p.sum().backward().unwrap();
        }
        let before: Vec<_> = store.params().map(|(_, p)| p.to_vec()).collect();
        let mut opt = AdamW::new(0.9, 0.999, 0.5);
        opt.step(&mut store, 0.1).unwrap();
        let after: Vec<_> = store.params().map(|(_, p)| p.to_vec()).collect();
        // BTreeMap order: fc.bias, fc.weight, x.ssm.a_log; each moves by lr·(1 + wd·w)
        let moved = |i: usize| before[i][0] - after[i][0];
        assert!((moved(0) - 0.1).abs() < 1e-6);
        assert!((moved(1) - 0.15).abs() < 1e-6);
        assert!((moved(2) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut store = ParamStore::init(&[ParamSpec::new("w", &[3, 2], Init::Normal(1.0))], 1).unwrap();
        let before = store.get("w").unwrap().to_vec();
        store.get("w").unwrap().square().sum().backward().unwrap();
        AdamW::default().step(&mut store, 0.0).unwrap();
        assert_eq!(store.get("w").unwrap().to_vec(), before);
    }
}
