use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use super::dataset::SyntheticDataset;
use super::optim::{lr_at, AdamW};
use crate::error::{Error, Result};
use crate::model::{param_rng, Checkpoint, Mode, Model, ModelConfig};
use crate::tensor::{NoGradGuard, Tensor};

pub const METRICS_HEADER: &str = "step,split,loss,accuracy,lr";
const EVAL_BATCH: usize = 64;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    /// When set, replaces `epochs` as the run length.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Extra evaluation every this many steps; 0 evaluates at epoch ends only.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            max_steps: None,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            warmup_frac: 0.05,
            label_smoothing: 0.1,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.unwrap_or(0).to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("warmup_frac", format!("{:?}", self.warmup_frac)),
            ("label_smoothing", format!("{:?}", self.label_smoothing)),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ])
    }

    /// Applies one `key=value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Format(format!("invalid value for {key}: {value:?}"));
        let uint = || value.parse::<u64>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "epochs" => self.epochs = uint()?,
            "max_steps" => self.max_steps = Some(uint()?).filter(|&s| s > 0),
            "batch_size" => self.batch_size = uint()? as usize,
            "lr" => self.lr = float()?,
            "beta1" => self.beta1 = float()?,
            "beta2" => self.beta2 = float()?,
            "weight_decay" => self.weight_decay = float()?,
            "warmup_frac" => self.warmup_frac = float()?,
            "label_smoothing" => self.label_smoothing = float()?,
            "seed" => self.seed = uint()?,
            "eval_every" => self.eval_every = uint()?,
            _ => return Err(Error::Format(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.warmup_frac)
            && (0.0..1.0).contains(&self.label_smoothing);
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        format!("{},{},{:?},{:?},{:?}", self.step, self.split.as_str(), self.loss, self.accuracy, self.lr)
    }
}

/// Mean loss and accuracy over `indices`, in evaluation mode.
pub fn evaluate(model: &Model, data: &SyntheticDataset, indices: &[usize], smoothing: f64) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Domain("nothing to evaluate".into()));
    }
    let _guard = NoGradGuard::new();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.forward(&x, Mode::Eval)?.logits;
        loss += logits.cross_entropy(&y, smoothing)?.item() * chunk.len() as f64;
        correct += count_correct(&logits, &y);
    }
    Ok((loss / indices.len() as f64, correct as f64 / indices.len() as f64))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            // first maximum wins ties
            let arg = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            arg == l
        })
        .count()
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    pub hyper: TrainConfig,
    pub step: u64,
    pub metrics: Vec<MetricRow>,
    /// Best validation accuracy so far and the step it was reached at.
    pub best: Option<(f64, u64)>,
    /// Running sums since the last log: loss·count, correct, count.
    window: (f64, u64, u64),
}

impl TrainState {
    pub fn new(config: ModelConfig, hyper: TrainConfig) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            model: Model::new(config, hyper.seed)?,
            opt: AdamW::new(hyper.beta1, hyper.beta2, hyper.weight_decay),
            hyper,
            step: 0,
            metrics: vec![],
            best: None,
            window: (0.0, 0, 0),
        })
    }

    pub fn steps_per_epoch(&self, data: &SyntheticDataset) -> u64 {
        (data.train.len() as u64).div_ceil(self.hyper.batch_size as u64)
    }

    pub fn total_steps(&self, data: &SyntheticDataset) -> u64 {
        self.hyper.max_steps.unwrap_or(self.hyper.epochs * self.steps_per_epoch(data))
    }

    pub fn last_val(&self) -> Option<&MetricRow> {
        self.metrics.iter().rev().find(|m| m.split == Split::Val)
    }

    fn epoch_order(&self, data: &SyntheticDataset, epoch: u64) -> Vec<usize> {
        let mut order = data.train.clone();
        order.shuffle(&mut param_rng(self.hyper.seed, &format!("shuffle/{epoch}")));
        order
    }

    /// One optimizer step on the next training batch.
    fn train_step(&mut self, data: &SyntheticDataset, order: &[usize], out: Option<&Path>) -> Result<()> {
        let spe = self.steps_per_epoch(data);
        let total = self.total_steps(data);
        let pos = (self.step % spe) as usize;
        let bs = self.hyper.batch_size;
        let idx = &order[pos * bs..((pos + 1) * bs).min(order.len())];
        let (x, y) = data.batch(idx)?;
        let mut rng = param_rng(self.hyper.seed, &format!("drop/{}", self.step));
        let lr = lr_at(self.step, total, self.hyper.lr, self.hyper.warmup_frac);
        let fwd = self.model.forward(&x, Mode::Train(&mut rng))?;
        let loss = fwd.logits.cross_entropy(&y, self.hyper.label_smoothing)?;
        if !loss.item().is_finite() {
            return Err(self.numerics_failure(loss.item(), lr, idx, out));
        }
        self.model.store.zero_grad();
        loss.backward()?;
        self.opt.step(&mut self.model.store, lr)?;
        let stats = fwd.batch_stats.ok_or_else(|| Error::Contract("training forward without batch stats".into()))?;
        let last = &fwd.stages[3];
        let per_channel = last.numel() / last.shape()[3];
        self.model.update_running_stats(&stats, per_channel)?;
        self.window.0 += loss.item() * idx.len() as f64;
        self.window.1 += count_correct(&fwd.logits, &y) as u64;
        self.window.2 += idx.len() as u64;
        self.step += 1;
        Ok(())
    }

    fn numerics_failure(&self, loss: f64, lr: f64, idx: &[usize], out: Option<&Path>) -> Error {
        let mut msg = format!("non-finite loss {loss} at step {} (lr {lr:e}), batch {idx:?}", self.step);
        let bad: Vec<&str> = self.model.store.params().filter(|(_, p)| !p.all_finite()).map(|(n, _)| n.as_str()).collect();
        if !bad.is_empty() {
            let _ = write!(msg, "; non-finite parameters: {}", bad.join(", "));
        }
        if let Some(dir) = out {
            let mut dump = format!("{msg}\n");
            for (n, p) in self.model.store.params() {
                let max = p.data().iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
                let _ = writeln!(dump, "{n} max_abs={max:e}");
            }
            let path = dir.join(format!("nan_step_{}.txt", self.step));
            if std::fs::write(&path, dump).is_ok() {
                let _ = write!(msg, " (dump in {})", path.display());
            }
        }
        Error::Numerics(msg)
    }

    fn log(&mut self, data: &SyntheticDataset, out: Option<&Path>) -> Result<()> {
        let total = self.total_steps(data);
        let lr = lr_at(self.step.saturating_sub(1), total, self.hyper.lr, self.hyper.warmup_frac);
        let (sum, correct, seen) = std::mem::take(&mut self.window);
        let mut rows = vec![];
        if seen > 0 {
            rows.push(MetricRow {
                step: self.step,
                split: Split::Train,
                loss: sum / seen as f64,
                accuracy: correct as f64 / seen as f64,
                lr,
            });
        }
        let (loss, accuracy) = evaluate(&self.model, data, &data.val, self.hyper.label_smoothing)?;
        rows.push(MetricRow { step: self.step, split: Split::Val, loss, accuracy, lr });
        let improved = self.best.is_none_or(|(b, _)| accuracy > b);
        if improved {
            self.best = Some((accuracy, self.step));
        }
        if let Some(dir) = out {
            append_metrics(&dir.join("metrics.csv"), &rows)?;
        }
        self.metrics.extend(rows);
        if let Some(dir) = out {
            let ck = self.to_checkpoint();
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
        }
        Ok(())
    }

    /// Trains until the configured number of steps, logging at epoch ends.
    pub fn run(&mut self, data: &SyntheticDataset, out: Option<&Path>) -> Result<()> {
        self.run_until(data, self.total_steps(data), out)
    }

    /// Like [`TrainState::run`] but stops early after step `stop`; the
    /// schedule still follows the full run length.
    pub fn run_until(&mut self, data: &SyntheticDataset, stop: u64, out: Option<&Path>) -> Result<()> {
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Domain("dataset needs both training and validation samples".into()));
        }
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            if self.step == 0 || !path.exists() {
                std::fs::write(&path, format!("{METRICS_HEADER}\n"))?;
            }
        }
        let spe = self.steps_per_epoch(data);
        let total = self.total_steps(data);
        let mut order: Option<(u64, Vec<usize>)> = None;
        while self.step < total.min(stop) {
            let epoch = self.step / spe;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, self.epoch_order(data, epoch)));
            }
            self.train_step(data, &order.as_ref().unwrap().1, out)?;
            let epoch_end = self.step % spe == 0;
            let periodic = self.hyper.eval_every > 0 && self.step % self.hyper.eval_every == 0;
            if epoch_end || periodic || self.step == total {
                self.log(data, out)?;
            }
        }
        Ok(())
    }

    /// Weights, optimizer moments and loop position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.step, self.hyper.seed);
        for (n, m) in &self.opt.m {
            ck.tensors.insert(format!("adam_m/{n}"), Tensor::from_vec(m.clone()));
        }
        for (n, v) in &self.opt.v {
            ck.tensors.insert(format!("adam_v/{n}"), Tensor::from_vec(v.clone()));
        }
        for (k, v) in self.hyper.entries() {
            ck.meta.insert(format!("train.{k}"), v);
        }
        ck.meta.insert("opt.t".into(), self.opt.t.to_string());
        ck.meta.insert("window.loss".into(), format!("{:?}", self.window.0));
        ck.meta.insert("window.correct".into(), self.window.1.to_string());
        ck.meta.insert("window.seen".into(), self.window.2.to_string());
        if let Some((acc, step)) = self.best {
            ck.meta.insert("best.accuracy".into(), format!("{acc:?}"));
            ck.meta.insert("best.step".into(), step.to_string());
        }
        if let Some(v) = self.last_val() {
            ck.meta.insert("val.accuracy".into(), format!("{:?}", v.accuracy));
            ck.meta.insert("val.loss".into(), format!("{:?}", v.loss));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.to_model()?;
        let mut hyper = TrainConfig::default();
        for (k, v) in &ck.meta {
            if let Some(key) = k.strip_prefix("train.") {
                hyper.set(key, v)?;
            }
        }
        hyper.validate()?;
        let meta = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let num = |k: &str| -> Result<u64> { meta(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
        let mut opt = AdamW::new(hyper.beta1, hyper.beta2, hyper.weight_decay);
        opt.t = num("opt.t")?;
        for (n, t) in &ck.tensors {
            if let Some(p) = n.strip_prefix("adam_m/") {
                opt.m.insert(p.to_string(), t.to_vec());
            } else if let Some(p) = n.strip_prefix("adam_v/") {
                opt.v.insert(p.to_string(), t.to_vec());
            }
        }
        let float = |k: &str| -> Result<f64> { meta(k)?.parse().map_err(|_| Error::Format(format!("bad {k}"))) };
        let best = match ck.meta.get("best.accuracy") {
            Some(_) => Some((float("best.accuracy")?, num("best.step")?)),
            None => None,
        };
        Ok(Self {
            model,
            opt,
            hyper,
            step: ck.step,
            metrics: vec![],
            best,
            window: (float("window.loss")?, num("window.correct")?, num("window.seen")?),
        })
    }
}

fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path)?;
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    Ok(())
}

/// Fresh run from `config`, seeded by `hyper.seed`.
pub fn train(config: ModelConfig, data: &SyntheticDataset, hyper: TrainConfig, out: Option<&Path>) -> Result<TrainState> {
    let mut state = TrainState::new(config, hyper)?;
    state.run(data, out)?;
    Ok(state)
}

/// Continues a run saved with [`TrainState::to_checkpoint`].
pub fn resume(ck: &Checkpoint, data: &SyntheticDataset, out: Option<&Path>) -> Result<TrainState> {
    let mut state = TrainState::from_checkpoint(ck)?;
    state.run(data, out)?;
    Ok(state)
}
