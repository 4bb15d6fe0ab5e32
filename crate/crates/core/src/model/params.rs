use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a parameter is filled at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// `log(n + 1)` along the last axis, so that `A = −(n + 1)`.
    ALog,
    /// Inverse softplus of a log-uniform step in `[1e-3, 1e-1]`.
    DeltaBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn materialize(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.numel();
        match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::ALog => {
                let last = *self.shape.last().unwrap_or(&1);
                (0..n).map(|i| ((i % last + 1) as f64).ln()).collect()
            }
            Init::DeltaBias => (0..n)
                .map(|_| {
                    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
                    let dt = rng.random_range(lo..hi).exp();
                    // softplus⁻¹(dt) = log(expm1(dt))
                    dt.exp_m1().ln()
                })
                .collect(),
        }
    }
}

/// RNG stream for one named parameter; independent of every other name, so
/// adding or removing layers leaves the remaining weights unchanged.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

/// Named trainable parameters plus non-trainable buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut store = Self::default();
        for s in specs {
            if store.params.contains_key(&s.name) {
                return Err(Error::Contract(format!("duplicate parameter {}", s.name)));
            }
            let data = s.materialize(&mut param_rng(seed, &s.name));
            store.params.insert(s.name.clone(), Tensor::param(&s.shape, data)?);
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let old = self.get(name)?;
        let t = Tensor::param(old.shape(), data)?;
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: &str, t: Tensor) {
        self.buffers.insert(name.to_string(), t);
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_name_streams_are_independent() {
        let a = [ParamSpec::new("x", &[4], Init::Normal(1.0)), ParamSpec::new("y", &[3], Init::Normal(1.0))];
        let b = [ParamSpec::new("y", &[3], Init::Normal(1.0))];
        let sa = ParamStore::init(&a, 5).unwrap();
        let sb = ParamStore::init(&b, 5).unwrap();
        assert_eq!(sa.get("y").unwrap().to_vec(), sb.get("y").unwrap().to_vec());
        let sc = ParamStore::init(&b, 6).unwrap();
        assert_ne!(sc.get("y").unwrap().to_vec(), sb.get("y").unwrap().to_vec());
    }

    #[test]
    fn structured_inits() {
        let specs = [
            ParamSpec::new("a", &[2, 3], Init::ALog),
            ParamSpec::new("dt", &[50], Init::DeltaBias),
        ];
        let s = ParamStore::init(&specs, 0).unwrap();
        let a: Vec<f64> = s.get("a").unwrap().data().iter().map(|v| -v.exp()).collect();
        for (got, want) in a.iter().zip([-1.0, -2.0, -3.0, -1.0, -2.0, -3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for &b in s.get("dt").unwrap().data() {
            let dt = crate::tensor::Tensor::scalar(b).softplus().item();
            assert!((1e-3..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let specs = [ParamSpec::new("a", &[1], Init::Zeros), ParamSpec::new("a", &[1], Init::Zeros)];
        assert!(matches!(ParamStore::init(&specs, 0), Err(Error::Contract(_))));
    }
}
