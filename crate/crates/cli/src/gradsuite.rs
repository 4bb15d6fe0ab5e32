//! Finite-difference checks of every backward pass the model relies on.

use damamba::gradcheck::GradCheck;
use damamba::model::{block_forward, block_prefix, stem, Mode, ModelConfig, ParamStore};
use damamba::sampler::grid_sample;
use damamba::scan::{das_resample, Opn};
use damamba::ssm::{selective_params, selective_scan, selective_ssm, SsmParams};
use damamba::tensor::Conv2dSpec;
use damamba::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Check groups, in run order.
pub const OPS: [&str; 9] = [
    "elementwise",
    "linalg",
    "conv",
    "norm",
    "selective_scan",
    "sampler",
    "opn",
    "block",
    "stem",
];

#[derive(Clone, Debug)]
pub struct OpResult {
    pub op: String,
    pub worst: f64,
    pub threshold: f64,
    pub probed: usize,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.worst < self.threshold
    }
}

fn threshold(op: &str) -> f64 {
    match op {
        "block" | "stem" => 1e-3,
        _ => 1e-4,
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Weighted sum so that no output direction is privileged.
fn probe(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = rand_t(&mut rng, y.shape(), -1.0, 1.0);
    Ok(y.mul(&w)?.sum())
}

/// Coordinates at least `margin` pixels away from every lattice line.
fn off_lattice(rng: &mut ChaCha8Rng, count: usize, h: usize, w: usize, margin: f64) -> Vec<f64> {
    let pick = |rng: &mut ChaCha8Rng, size: usize| -> f64 {
        let cell = rng.random_range(0..size - 1) as f64;
        let p = cell + rng.random_range(margin..1.0 - margin);
        2.0 * p / (size - 1) as f64 - 1.0
    };
    (0..count).flat_map(|_| [pick(rng, w), pick(rng, h)]).collect()
}

fn check(op: &str, seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gc = GradCheck { seed, ..GradCheck::default() };
    let r = match op {
        "elementwise" => {
            let a = rand_t(&mut rng, &[3, 4], -1.5, 1.5);
            let b = rand_t(&mut rng, &[4], 0.5, 2.0);
            gc.run(&[a, b], |v| {
                let (a, b) = (&v[0], &v[1]);
                let t = a.mul(b)?.add(&a.exp().tanh())?.sub(&a.sigmoid().mul(&b.softplus())?)?;
                let t = t.add(&a.gelu())?.add(&a.silu())?.add(&b.ln().mul(&a.square())?)?;
                let t = t.div(&b.sqrt().add_scalar(1.0))?;
                probe(&t.clamp(-4.0, 4.0), seed)
            })?
        }
        "linalg" => {
            let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
            let b = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
            let bias = rand_t(&mut rng, &[2], -1.0, 1.0);
            gc.run(&[a, b, bias], |v| {
                let y = v[0].matmul(&v[1])?.add(&v[0].linear(&v[1], Some(&v[2]))?)?;
                probe(&y, seed)
            })?
        }
        "conv" => {
            let x = rand_t(&mut rng, &[2, 5, 5, 3], -1.0, 1.0);
            let w = rand_t(&mut rng, &[3, 3, 3, 4], -0.5, 0.5);
            let b = rand_t(&mut rng, &[4], -0.5, 0.5);
            let dw = rand_t(&mut rng, &[3, 3, 1, 4], -0.5, 0.5);
            gc.run(&[x, w, b, dw], |v| {
                let y = v[0].conv2d(&v[1], Some(&v[2]), Conv2dSpec::new(2, 1, 1))?;
                let z = y.conv2d(&v[3], None, Conv2dSpec::new(1, 1, 4))?;
                probe(&z, seed)
            })?
        }
        "norm" => {
            let x = rand_t(&mut rng, &[3, 2, 2, 5], -2.0, 2.0);
            let g = rand_t(&mut rng, &[5], 0.5, 1.5);
            let b = rand_t(&mut rng, &[5], -0.5, 0.5);
            gc.run(&[x, g, b], |v| {
                let y = v[0].layer_norm_affine(&v[1], &v[2])?;
                let (z, _) = y.batch_norm_train()?;
                let logits = z.global_avg_pool()?;
                Ok(logits.cross_entropy(&[0, 3, 4], 0.1)?.add(&probe(&z, seed)?)?)
            })?
        }
        "selective_scan" => {
            let (l, d, n) = (6, 4, 3);
            let params = SsmParams::init(d, n, &mut rng)?;
            let x = rand_t(&mut rng, &[1, l, d], -1.0, 1.0);
            let inputs = [
                x,
                params.a_log.clone(),
                params.delta_down.clone(),
                params.delta_up.clone(),
                params.delta_bias.clone(),
                params.b_proj.clone(),
                params.c_proj.clone(),
            ];
            gc.run(&inputs, |v| {
                let p = SsmParams {
                    a_log: v[1].clone(),
                    delta_down: v[2].clone(),
                    delta_up: v[3].clone(),
                    delta_bias: v[4].clone(),
                    b_proj: v[5].clone(),
                    c_proj: v[6].clone(),
                };
                let sel = selective_params(&v[0], &p)?;
                let unfused = selective_scan(&v[0], &sel.disc, &sel.c)?;
                probe(&unfused.add(&selective_ssm(&v[0], &p)?)?, seed)
            })?
        }
        "sampler" => {
            let (h, w) = (5, 5);
            let x = rand_t(&mut rng, &[1, h, w, 2], -1.0, 1.0);
            let coords = Tensor::new(&[1, 25, 40, 2], off_lattice(&mut rng, 1000, h, w, 0.01))?;
            gc.run(&[x, coords], |v| probe(&grid_sample(&v[0], &v[1])?, seed))?
        }
        "opn" => {
            let c = 4;
            let mut opn = Opn::init(c, 0.5, &mut rng)?;
            opn.head_weight = rand_t(&mut rng, &[c, 2], -0.5, 0.5);
            opn.head_bias = rand_t(&mut rng, &[2], -0.2, 0.2);
            let x = rand_t(&mut rng, &[1, 4, 4, c], -1.0, 1.0);
            let inputs = [x, opn.dw_weight.clone(), opn.head_weight.clone(), opn.head_bias.clone()];
            gc.run(&inputs, |v| {
                let o = Opn { dw_weight: v[1].clone(), head_weight: v[2].clone(), head_bias: v[3].clone(), ..opn.clone() };
                probe(&das_resample(&v[0], &o)?.features, seed)
            })?
        }
        "block" => {
            let cfg = ModelConfig { channels: [6, 8, 8, 8], ..ModelConfig::micro() };
            let mut store = ParamStore::init(&damamba::model::param_specs(&cfg), seed)?;
            let prefix = block_prefix(0, 0);
            let head = format!("{prefix}.mixer.opn.head.weight");
            let n = store.get(&head)?.numel();
            store.set(&head, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())?;
            let names = [head, format!("{prefix}.mixer.in_proj.weight"), format!("{prefix}.mixer.ssm.a_log")];
            let x = rand_t(&mut rng, &[1, 3, 3, 6], -1.0, 1.0);
            let mut inputs = vec![x];
            for name in &names {
                inputs.push(store.get(name)?.clone());
            }
            let gc = GradCheck { max_coords: Some(50), ..gc };
            gc.run(&inputs, |v| {
                let mut s = store.clone();
                for (name, t) in names.iter().zip(&v[1..]) {
                    s.insert(name, t.clone());
                }
                let y = block_forward(&s, &cfg, &prefix, &v[0], &mut Mode::Eval)?.y;
                probe(&y, seed)
            })?
        }
        "stem" => {
            let cfg = ModelConfig { channels: [4, 8, 8, 8], ..ModelConfig::micro() };
            let store = ParamStore::init(&damamba::model::param_specs(&cfg), seed)?;
            let x = rand_t(&mut rng, &[1, 32, 32, 3], -1.0, 1.0);
            let w = store.get("stem.conv1.weight")?.clone();
            let gc = GradCheck { max_coords: Some(100), ..gc };
            gc.run(&[x, w], |v| {
                let mut s = store.clone();
                s.insert("stem.conv1.weight", v[1].clone());
                probe(&stem(&s, &cfg, &v[0])?, seed)
            })?
        }
        other => return Err(damamba::Error::Domain(format!("unknown grad-check op '{other}'"))),
    };
    Ok((r.max_rel_err, r.probed))
}

/// Negative control: a loss whose tape gradient has the wrong sign.
///
/// `f = Σ 3·x_d² − 2·x·x_d` with `x_d` detached; the true gradient at `x`
/// is `−2·x_d = −2x`, the tape sees `−2·x_d` too but the `3·x_d²` term, being
/// detached, is invisible, so analytic and numeric derivatives disagree in
/// sign (`−2x` against `+4x`).
fn wrong_sign(seed: u64) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&mut rng, &[6], 0.5, 1.5);
    let r = GradCheck::default().run(&[x], |v| {
        let xd = v[0].detach();
        Ok(xd.square().scale(3.0).sub(&v[0].mul(&xd)?.scale(2.0))?.sum())
    })?;
    Ok((r.max_rel_err, r.probed))
}

/// Runs the selected groups; `only` filters by name, `inject` adds the
/// negative control.
pub fn run_suite(only: Option<&str>, inject: bool, seed: u64) -> Result<Vec<OpResult>> {
    if let Some(op) = only {
        if !OPS.contains(&op) {
            return Err(damamba::Error::Domain(format!("unknown grad-check op '{op}', expected one of {OPS:?}")));
        }
    }
    let mut out = vec![];
    for op in OPS.iter().filter(|o| only.is_none_or(|f| f == **o)) {
        let (worst, probed) = check(op, seed)?;
        out.push(OpResult { op: op.to_string(), worst, threshold: threshold(op), probed });
    }
    if inject {
        let (worst, probed) = wrong_sign(seed)?;
        out.push(OpResult { op: "injected".into(), worst, threshold: 1e-4, probed });
    }
    Ok(out)
}
