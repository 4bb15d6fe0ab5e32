use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{Init, ParamSpec, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::scan::{apply_plan, das_resample, sweeping_scan, unapply_plan, DasResample, Opn};
use crate::ssm::{delta_rank, selective_ssm, SsmParams};
use crate::tensor::{BatchNormStats, Conv2dSpec, Tensor};

/// Running-statistics momentum of the head's batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

const RUNNING_MEAN: &str = "head.bn.running_mean";
const RUNNING_VAR: &str = "head.bn.running_var";

fn lecun(fan_in: usize) -> Init {
    Init::Normal(1.0 / (fan_in as f64).sqrt())
}

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec::new(name, shape, init));
    }

    fn conv(&mut self, p: &str, cin_per_group: usize, cout: usize) {
        self.push(format!("{p}.weight"), &[3, 3, cin_per_group, cout], lecun(9 * cin_per_group));
        self.push(format!("{p}.bias"), &[cout], Init::Zeros);
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.push(format!("{p}.gamma"), &[c], Init::Ones);
        self.push(format!("{p}.beta"), &[c], Init::Zeros);
    }

    fn linear(&mut self, p: &str, cin: usize, cout: usize, bias: bool) {
        self.push(format!("{p}.weight"), &[cin, cout], lecun(cin));
        if bias {
            self.push(format!("{p}.bias"), &[cout], Init::Zeros);
        }
    }

    fn block(&mut self, p: &str, c: usize, cfg: &ModelConfig) {
        let e = cfg.expand * c;
        let (n, r) = (cfg.state_size, delta_rank(e));
        if cfg.use_convpos {
            self.conv(&format!("{p}.convpos"), 1, c);
        }
        self.norm(&format!("{p}.norm1"), c);
        self.linear(&format!("{p}.mixer.in_proj"), c, 2 * e, false);
        self.conv(&format!("{p}.mixer.conv"), 1, e);
        if cfg.use_das {
            let o = format!("{p}.mixer.opn");
            self.conv(&format!("{o}.dw"), 1, e);
            self.norm(&format!("{o}.norm"), e);
            self.push(format!("{o}.head.weight"), &[e, 2], Init::Zeros);
            self.push(format!("{o}.head.bias"), &[2], Init::Zeros);
        }
        let s = format!("{p}.mixer.ssm");
        self.push(format!("{s}.a_log"), &[e, n], Init::ALog);
        self.push(format!("{s}.delta_down"), &[e, r], lecun(e));
        self.push(format!("{s}.delta_up"), &[r, e], lecun(r));
        self.push(format!("{s}.delta_bias"), &[e], Init::DeltaBias);
        self.push(format!("{s}.b_proj"), &[e, n], lecun(e));
        self.push(format!("{s}.c_proj"), &[e, n], lecun(e));
        self.push(format!("{s}.d_skip"), &[e], Init::Ones);
        self.linear(&format!("{p}.mixer.out_proj"), e, c, false);
        self.norm(&format!("{p}.norm2"), c);
        let hid = cfg.ffn_ratio * c;
        self.linear(&format!("{p}.ffn.fc1"), c, hid, true);
        if cfg.use_convffn {
            self.conv(&format!("{p}.ffn.dw"), 1, hid);
        }
        self.linear(&format!("{p}.ffn.fc2"), hid, c, true);
    }
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

/// Every trainable parameter of the network, in construction order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs::default();
    let c = cfg.channels;
    let half = c[0] / 2;
    s.conv("stem.conv1", cfg.in_channels, half);
    s.norm("stem.norm1", half);
    s.conv("stem.conv2", half, half);
    s.norm("stem.norm2", half);
    s.conv("stem.conv3", half, c[0]);
    s.norm("stem.norm3", c[0]);
    s.conv("stem.conv4", c[0], c[0]);
    s.norm("stem.norm4", c[0]);
    for stage in 0..4 {
        if stage > 0 {
            s.conv(&format!("stages.{stage}.down"), c[stage - 1], c[stage]);
            s.norm(&format!("stages.{stage}.down_norm"), c[stage]);
        }
        for b in 0..cfg.blocks[stage] {
            s.block(&block_prefix(stage, b), c[stage], cfg);
        }
    }
    s.norm("head.bn", c[3]);
    s.linear("head.fc", c[3], cfg.num_classes, true);
    s.0
}

/// Whether a forward pass is for training (batch statistics, stochastic
/// depth) or evaluation.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn conv(store: &ParamStore, p: &str, x: &Tensor, stride: usize, groups: usize) -> Result<Tensor> {
    let w = store.get(&format!("{p}.weight"))?;
    let b = store.get(&format!("{p}.bias"))?;
    x.conv2d(w, Some(b), Conv2dSpec::new(stride, 1, groups))
}

fn depthwise(store: &ParamStore, p: &str, x: &Tensor) -> Result<Tensor> {
    let c = *x.shape().last().unwrap_or(&0);
    conv(store, p, x, 1, c)
}

fn norm(store: &ParamStore, p: &str, x: &Tensor) -> Result<Tensor> {
    x.layer_norm_affine(store.get(&format!("{p}.gamma"))?, store.get(&format!("{p}.beta"))?)
}

/// Layer norm over all of `H × W × C` per sample, then a per-channel affine
/// map. Unlike the per-token norm it keeps contrast between locations.
fn sample_norm(store: &ParamStore, p: &str, x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let n = s[1..].iter().product();
    x.reshape(&[s[0], n])?
        .layer_norm(1)?
        .reshape(&s)?
        .mul(store.get(&format!("{p}.gamma"))?)?
        .add(store.get(&format!("{p}.beta"))?)
}

fn linear(store: &ParamStore, p: &str, x: &Tensor, bias: bool) -> Result<Tensor> {
    let b = if bias { Some(store.get(&format!("{p}.bias"))?) } else { None };
    x.linear(store.get(&format!("{p}.weight"))?, b)
}

fn dims4(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(shape_err!("expected [B, H, W, C], got {:?}", x.shape())),
    }
}

fn opn(store: &ParamStore, p: &str, offset_range: f64) -> Result<Opn> {
    let g = |s: &str| store.get(&format!("{p}.{s}")).cloned();
    Ok(Opn {
        dw_weight: g("dw.weight")?,
        dw_bias: g("dw.bias")?,
        norm_gamma: g("norm.gamma")?,
        norm_beta: g("norm.beta")?,
        head_weight: g("head.weight")?,
        head_bias: g("head.bias")?,
        offset_range,
    })
}

fn ssm(store: &ParamStore, p: &str) -> Result<SsmParams> {
    let g = |s: &str| store.get(&format!("{p}.{s}")).cloned();
    Ok(SsmParams {
        a_log: g("a_log")?,
        delta_down: g("delta_down")?,
        delta_up: g("delta_up")?,
        delta_bias: g("delta_bias")?,
        b_proj: g("b_proj")?,
        c_proj: g("c_proj")?,
    })
}

/// Per-sample stochastic depth on a residual branch.
fn drop_path(branch: Tensor, rate: f64, mode: &mut Mode) -> Result<Tensor> {
    let Mode::Train(rng) = mode else {
        return Ok(branch);
    };
    if rate == 0.0 {
        return Ok(branch);
    }
    let b = branch.shape()[0];
    let keep = 1.0 - rate;
    let mask = (0..b).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    branch.mul(&Tensor::new(&[b, 1, 1, 1], mask)?)
}

/// Output of one block.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub y: Tensor,
    /// Present when the block resampled with predicted offsets.
    pub das: Option<DasResample>,
}

fn mixer(store: &ParamStore, cfg: &ModelConfig, p: &str, u: &Tensor) -> Result<(Tensor, Option<DasResample>)> {
    let (_, h, w, c) = dims4(u)?;
    let e = cfg.expand * c;
    let xz = linear(store, &format!("{p}.in_proj"), u, false)?;
    let xs = xz.narrow(3, 0, e)?;
    let z = xz.narrow(3, e, e)?;
    let xs = depthwise(store, &format!("{p}.conv"), &xs)?.silu();
    let (xs, das) = if cfg.use_das {
        let r = das_resample(&xs, &opn(store, &format!("{p}.opn"), cfg.offset_range)?)?;
        (r.features.clone(), Some(r))
    } else {
        (xs, None)
    };
    let plan = sweeping_scan(h, w)?;
    let seq = apply_plan(&xs, &plan)?;
    let d_skip = store.get(&format!("{p}.ssm.d_skip"))?;
    let y = selective_ssm(&seq, &ssm(store, &format!("{p}.ssm"))?)?.add(&seq.mul(d_skip)?)?;
    let y = unapply_plan(&y, &plan)?.mul(&z.silu())?;
    Ok((linear(store, &format!("{p}.out_proj"), &y, false)?, das))
}

fn ffn(store: &ParamStore, cfg: &ModelConfig, p: &str, u: &Tensor) -> Result<Tensor> {
    let hdn = linear(store, &format!("{p}.fc1"), u, true)?;
    let hdn = if cfg.use_convffn {
        depthwise(store, &format!("{p}.dw"), &hdn)?
    } else {
        hdn
    };
    linear(store, &format!("{p}.fc2"), &hdn.gelu(), true)
}

/// One block on `[B, H, W, C]`; the output has the input's shape.
pub fn block_forward(store: &ParamStore, cfg: &ModelConfig, prefix: &str, x: &Tensor, mode: &mut Mode) -> Result<BlockOutput> {
    dims4(x)?;
    let mut x = x.clone();
    if cfg.use_convpos {
        x = x.add(&depthwise(store, &format!("{prefix}.convpos"), &x)?)?;
    }
    let (m, das) = mixer(store, cfg, &format!("{prefix}.mixer"), &norm(store, &format!("{prefix}.norm1"), &x)?)?;
    x = x.add(&drop_path(m, cfg.drop_path, mode)?)?;
    let f = ffn(store, cfg, &format!("{prefix}.ffn"), &norm(store, &format!("{prefix}.norm2"), &x)?)?;
    x = x.add(&drop_path(f, cfg.drop_path, mode)?)?;
    Ok(BlockOutput { y: x, das })
}

pub(crate) fn stem_unchecked(store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut y = x.clone();
    for (i, stride) in [2, 1, 2, 1].into_iter().enumerate() {
        y = conv(store, &format!("stem.conv{}", i + 1), &y, stride, 1)?;
        y = sample_norm(store, &format!("stem.norm{}", i + 1), &y)?;
        if i < 3 {
            y = y.gelu();
        }
    }
    Ok(y)
}

fn check_input(cfg: &ModelConfig, x: &Tensor) -> Result<()> {
    let (_, h, w, c) = dims4(x)?;
    if c != cfg.in_channels {
        return Err(shape_err!("expected {} input channels, got {}", cfg.in_channels, c));
    }
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(shape_err!("input {}x{} must be a positive multiple of 32", h, w));
    }
    Ok(())
}

/// Four overlapping 3×3 convolutions, `[B, H, W, 3] → [B, H/4, W/4, C₁]`.
pub fn stem(store: &ParamStore, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    check_input(cfg, x)?;
    stem_unchecked(store, x)
}

/// Offsets recorded by one DAS block during a forward pass.
#[derive(Clone, Debug)]
pub struct DasTrace {
    pub stage: usize,
    pub block: usize,
    pub resample: DasResample,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, num_classes]`.
    pub logits: Tensor,
    /// Output of each of the four stages.
    pub stages: Vec<Tensor>,
    pub das: Vec<DasTrace>,
    /// Batch statistics of the head norm; training mode only.
    pub batch_stats: Option<BatchNormStats>,
}

/// A configured network with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::init(&param_specs(&config), seed)?;
        let c = config.channels[3];
        store.set_buffer(RUNNING_MEAN, Tensor::zeros(&[c]));
        store.set_buffer(RUNNING_VAR, Tensor::ones(&[c]));
        Ok(Self { config, store })
    }

    pub fn running_stats(&self) -> Result<BatchNormStats> {
        let get = |n: &str| {
            self.store
                .buffer(n)
                .map(Tensor::to_vec)
                .ok_or_else(|| Error::Contract(format!("missing buffer {n}")))
        };
        Ok(BatchNormStats {
            mean: get(RUNNING_MEAN)?,
            var: get(RUNNING_VAR)?,
        })
    }

    /// Folds one batch's statistics into the running estimates. `count` is
    /// the number of values per channel the batch statistics were taken over.
    pub fn update_running_stats(&mut self, batch: &BatchNormStats, count: usize) -> Result<()> {
        let run = self.running_stats()?;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let blend = |r: &[f64], b: &[f64], k: f64| -> Vec<f64> {
            r.iter().zip(b).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * k).collect()
        };
        let c = run.mean.len();
        self.store.set_buffer(RUNNING_MEAN, Tensor::new(&[c], blend(&run.mean, &batch.mean, 1.0))?);
        self.store.set_buffer(RUNNING_VAR, Tensor::new(&[c], blend(&run.var, &batch.var, unbias))?);
        Ok(())
    }

    /// Full network on `[B, H, W, 3]` images.
    pub fn forward(&self, x: &Tensor, mut mode: Mode) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let store = &self.store;
        let mut y = stem(store, cfg, x)?;
        let mut stages = Vec::with_capacity(4);
        let mut das = vec![];
        for stage in 0..4 {
            if stage > 0 {
                y = conv(store, &format!("stages.{stage}.down"), &y, 2, 1)?;
                y = sample_norm(store, &format!("stages.{stage}.down_norm"), &y)?;
            }
            for block in 0..cfg.blocks[stage] {
                let out = block_forward(store, cfg, &block_prefix(stage, block), &y, &mut mode)?;
                y = out.y;
                if let Some(resample) = out.das {
                    das.push(DasTrace { stage, block, resample });
                }
            }
            stages.push(y.clone());
        }
        let (normed, batch_stats) = if mode.is_train() {
            let (n, s) = y.batch_norm_train()?;
            (n, Some(s))
        } else {
            (y.batch_norm_infer(&self.running_stats()?)?, None)
        };
        let pooled = norm_affine(store, "head.bn", &normed)?.global_avg_pool()?;
        let logits = linear(store, "head.fc", &pooled, true)?;
        Ok(ForwardOutput { logits, stages, das, batch_stats })
    }
}

fn norm_affine(store: &ParamStore, p: &str, x: &Tensor) -> Result<Tensor> {
    x.mul(store.get(&format!("{p}.gamma"))?)?.add(store.get(&format!("{p}.beta"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use rand::SeedableRng;

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn all_toggles() -> impl Iterator<Item = (bool, bool, bool)> {
        (0..8).map(|m| (m & 1 != 0, m & 2 != 0, m & 4 != 0))
    }

    #[test]
    fn block_preserves_shape_and_backprops_for_every_toggle() {
        for (das, pos, cffn) in all_toggles() {
            let cfg = ModelConfig::micro().with_toggles(das, pos, cffn);
            let store = ParamStore::init(&param_specs(&cfg), 3).unwrap();
            let x = rand_t(1, &[2, 4, 5, 16]);
            let out = block_forward(&store, &cfg, &block_prefix(0, 0), &x, &mut Mode::Eval).unwrap();
            assert_eq!(out.y.shape(), x.shape());
            assert_eq!(out.das.is_some(), das);
            out.y.square().mean().backward().unwrap();
            for (name, p) in store.params().filter(|(n, _)| n.starts_with("stages.0.blocks.0")) {
                assert!(p.grad().is_some(), "{name} got no gradient ({das},{pos},{cffn})");
            }
        }
    }

    #[test]
    fn fresh_das_block_matches_sweeping_baseline_bitwise() {
        for (_, pos, cffn) in all_toggles().filter(|t| t.0) {
            let on = ModelConfig::micro().with_toggles(true, pos, cffn);
            let off = ModelConfig::micro().with_toggles(false, pos, cffn);
            let s_on = ParamStore::init(&param_specs(&on), 9).unwrap();
            let s_off = ParamStore::init(&param_specs(&off), 9).unwrap();
            let x = rand_t(4, &[1, 6, 7, 16]);
            let p = block_prefix(0, 0);
            let a = block_forward(&s_on, &on, &p, &x, &mut Mode::Eval).unwrap().y;
            let b = block_forward(&s_off, &off, &p, &x, &mut Mode::Eval).unwrap().y;
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn micro_backbone_shapes() {
        let model = Model::new(ModelConfig::micro(), 0).unwrap();
        let x = rand_t(2, &[2, 64, 64, 3]);
        let out = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.logits.shape(), &[2, 4]);
        let spatial: Vec<_> = out.stages.iter().map(|s| s.shape()[1..].to_vec()).collect();
        assert_eq!(spatial, vec![vec![16, 16, 16], vec![8, 8, 32], vec![4, 4, 64], vec![2, 2, 64]]);
        assert_eq!(out.das.len(), 5);
        assert!(out.batch_stats.is_none());
    }

    #[test]
    fn stem_downsamples_by_four() {
        let cfg = ModelConfig::micro();
        let store = ParamStore::init(&param_specs(&cfg), 0).unwrap();
        let y = stem(&store, &cfg, &rand_t(0, &[1, 64, 64, 3])).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16, 16]);
        let _guard = crate::tensor::NoGradGuard::new();
        let t = ModelConfig::tiny();
        let st = ParamStore::init(&param_specs(&t).into_iter().filter(|s| s.name.starts_with("stem")).collect::<Vec<_>>(), 0).unwrap();
        let y = stem(&st, &t, &Tensor::zeros(&[1, 224, 224, 3])).unwrap();
        assert_eq!(y.shape(), &[1, 56, 56, 80]);
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let model = Model::new(ModelConfig::micro(), 0).unwrap();
        for shape in [[1, 48, 64, 3], [1, 64, 64, 1], [1, 0, 64, 3]] {
            let r = model.forward(&Tensor::zeros(&shape), Mode::Eval);
            assert!(matches!(r, Err(Error::Shape(_))), "{shape:?}");
        }
    }

    #[test]
    fn stem_gradcheck_on_small_input() {
        let mut cfg = ModelConfig::micro();
        cfg.channels[0] = 4;
        let specs: Vec<_> = param_specs(&cfg).into_iter().filter(|s| s.name.starts_with("stem")).collect();
        let store = ParamStore::init(&specs, 1).unwrap();
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let mut inputs = vec![rand_t(7, &[1, 8, 8, 3])];
        inputs.extend(names.iter().map(|n| store.get(n).unwrap().detach()));
        let report = GradCheck { max_coords: Some(40), ..GradCheck::default() }
            .run(&inputs, |v| {
                let mut s = ParamStore::default();
                for (n, t) in names.iter().zip(&v[1..]) {
                    s.insert(n, t.clone());
                }
                let y = stem_unchecked(&s, &v[0])?;
                let w = rand_t(8, y.shape());
                Ok(y.mul(&w)?.sum())
            })
            .unwrap();
        assert!(report.max_rel_err < 1e-3, "{}", report.max_rel_err);
    }

    #[test]
    fn training_mode_reports_batch_stats_and_updates_running() {
        let mut model = Model::new(ModelConfig::micro(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&rand_t(5, &[2, 64, 64, 3]), Mode::Train(&mut rng)).unwrap();
        let stats = out.batch_stats.unwrap();
        let before = model.running_stats().unwrap();
        model.update_running_stats(&stats, 8).unwrap();
        let after = model.running_stats().unwrap();
        let want = 0.9 * before.mean[0] + 0.1 * stats.mean[0];
        assert!((after.mean[0] - want).abs() < 1e-15);
    }

    #[test]
    fn drop_path_is_identity_in_eval() {
        let mut cfg = ModelConfig::micro();
        cfg.drop_path = 0.5;
        let store = ParamStore::init(&param_specs(&cfg), 3).unwrap();
        let x = rand_t(1, &[4, 4, 4, 16]);
        let p = block_prefix(0, 0);
        let a = block_forward(&store, &cfg, &p, &x, &mut Mode::Eval).unwrap().y;
        let b = block_forward(&store, &cfg, &p, &x, &mut Mode::Eval).unwrap().y;
        assert_eq!(a.to_vec(), b.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = block_forward(&store, &cfg, &p, &x, &mut Mode::Train(&mut rng)).unwrap().y;
        assert_ne!(a.to_vec(), c.to_vec());
    }
}
