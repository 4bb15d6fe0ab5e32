//! Central finite-difference checks for the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{NoGradGuard, Tensor};

/// Relative error floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates probed per input; `None` probes every one.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub probed: usize,
    /// Analytic gradients, one per input.
    pub analytic: Vec<Vec<f64>>,
}

impl GradCheck {
    /// Compares tape gradients of `f` against central differences.
    ///
    /// `inputs` only supply shapes and values; fresh leaves are built for the
    /// analytic pass so existing gradient slots are untouched.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
    {
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|t| Tensor::param(t.shape(), t.to_vec()))
            .collect::<Result<_>>()?;
        let loss = f(&leaves)?;
        if loss.numel() != 1 {
            return Err(Error::Contract("gradcheck objective must be scalar".into()));
        }
        loss.backward()?;
        let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad_tensor().to_vec()).collect();

        let _ng = NoGradGuard::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let eval = |vals: &[Vec<f64>]| -> Result<f64> {
            let ts: Vec<Tensor> = inputs
                .iter()
                .zip(vals)
                .map(|(t, v)| Tensor::new(t.shape(), v.clone()))
                .collect::<Result<_>>()?;
            Ok(f(&ts)?.item())
        };
        let mut vals: Vec<Vec<f64>> = inputs.iter().map(|t| t.to_vec()).collect();
        let mut report = GradReport {
            analytic: analytic.clone(),
            ..Default::default()
        };
        for i in 0..inputs.len() {
            let n = vals[i].len();
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
                _ => (0..n).collect(),
            };
            for j in coords {
                let orig = vals[i][j];
                vals[i][j] = orig + self.step;
                let fp = eval(&vals)?;
                vals[i][j] = orig - self.step;
                let fm = eval(&vals)?;
                vals[i][j] = orig;
                let numeric = (fp - fm) / (2.0 * self.step);
                let e = rel_err(analytic[i][j], numeric);
                let e = if e.is_nan() { f64::INFINITY } else { e };
                report.max_rel_err = report.max_rel_err.max(e);
                report.probed += 1;
            }
        }
        Ok(report)
    }
}

/// Worst relative error over every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    Ok(GradCheck::default().run(inputs, f)?.max_rel_err)
}
