//! Plain-text run configuration: `section.key=value` lines.
//!
//! Sections are `model`, `train` and `data`; `model.preset` selects the
//! starting point for the other model keys wherever it appears. Blank lines
//! and lines starting with `#` are ignored. Unknown keys are errors.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use damamba::harness::{DatasetSpec, TrainConfig};
use damamba::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "micro".into(),
            model: ModelConfig::micro(),
            train: TrainConfig::default(),
            data: DatasetSpec::default(),
            data_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = vec![];
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", no + 1))?;
            pairs.push((no + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        if let Some((_, _, v)) = pairs.iter().rev().find(|(_, k, _)| k == "model.preset") {
            cfg.model = ModelConfig::by_name(v).ok_or_else(|| anyhow!("unknown model preset {v:?}"))?;
            cfg.preset = v.clone();
        }
        for (no, k, v) in &pairs {
            cfg.set(k, v).with_context(|| format!("line {no}"))?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, name) = key.split_once('.').ok_or_else(|| anyhow!("key {key:?} lacks a section"))?;
        match (section, name) {
            ("model", "preset") => {}
            ("model", _) => self.model.set(name, value)?,
            ("train", _) => self.train.set(name, value)?,
            ("data", "seed") => self.data_seed = value.parse().map_err(|_| anyhow!("invalid data.seed {value:?}"))?,
            ("data", _) => self.data.set(name, value)?,
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    /// Every resolved setting, one `key=value` per line.
    pub fn resolved(&self) -> String {
        let mut out = format!("model.preset={}\n", self.preset);
        for line in self.model.to_kv().lines() {
            out.push_str(&format!("model.{line}\n"));
        }
        for (k, v) in self.train.entries() {
            out.push_str(&format!("train.{k}={v}\n"));
        }
        out.push_str(&format!("data.seed={}\n", self.data_seed));
        for (k, v) in self.data.entries() {
            out.push_str(&format!("data.{k}={v}\n"));
        }
        out
    }
}
