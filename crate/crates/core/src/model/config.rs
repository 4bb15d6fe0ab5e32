use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scan::DEFAULT_OFFSET_RANGE;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    pub num_classes: usize,
    pub in_channels: usize,
    /// SSM state size `N`.
    pub state_size: usize,
    /// Inner width of the mixer relative to the block width.
    pub expand: usize,
    /// Hidden width of the feed-forward branch relative to the block width.
    pub ffn_ratio: usize,
    pub use_das: bool,
    pub use_convpos: bool,
    pub use_convffn: bool,
    pub offset_range: f64,
    pub drop_path: f64,
}

impl ModelConfig {
    fn preset(channels: [usize; 4], blocks: [usize; 4]) -> Self {
        Self {
            channels,
            blocks,
            num_classes: 1000,
            in_channels: 3,
            state_size: 16,
            expand: 1,
            ffn_ratio: 3,
            use_das: true,
            use_convpos: true,
            use_convffn: true,
            offset_range: DEFAULT_OFFSET_RANGE,
            drop_path: 0.0,
        }
    }

    pub fn tiny() -> Self {
        Self::preset([80, 160, 320, 512], [3, 4, 12, 5])
    }

    pub fn small() -> Self {
        Self::preset([96, 192, 384, 512], [4, 8, 20, 6])
    }

    pub fn base() -> Self {
        Self::preset([112, 224, 448, 640], [4, 8, 25, 8])
    }

    /// Desk-scale variant for CPU experiments.
    pub fn micro() -> Self {
        Self {
            num_classes: 4,
            ..Self::preset([16, 32, 64, 64], [1, 1, 2, 1])
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "tiny" | "t" => Some(Self::tiny()),
            "small" | "s" => Some(Self::small()),
            "base" | "b" => Some(Self::base()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    /// Ablation toggles in cumulative order: baseline, +DAS, +convpos, +ConvFFN.
    pub fn with_toggles(mut self, das: bool, convpos: bool, convffn: bool) -> Self {
        self.use_das = das;
        self.use_convpos = convpos;
        self.use_convffn = convffn;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if self.channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            return bad(format!("channels must be even and positive: {:?}", self.channels));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.state_size == 0 || self.expand == 0 || self.ffn_ratio == 0 {
            return bad("in_channels, state_size, expand and ffn_ratio must be positive".into());
        }
        if !(self.offset_range > 0.0 && self.offset_range.is_finite()) {
            return bad(format!("offset_range must be positive, got {}", self.offset_range));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path must lie in [0, 1), got {}", self.drop_path));
        }
        Ok(())
    }

    fn entries(&self) -> BTreeMap<&'static str, String> {
        let list = |v: &[usize; 4]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        BTreeMap::from([
            ("channels", list(&self.channels)),
            ("blocks", list(&self.blocks)),
            ("num_classes", self.num_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("state_size", self.state_size.to_string()),
            ("expand", self.expand.to_string()),
            ("ffn_ratio", self.ffn_ratio.to_string()),
            ("use_das", self.use_das.to_string()),
            ("use_convpos", self.use_convpos.to_string()),
            ("use_convffn", self.use_convffn.to_string()),
            ("offset_range", format!("{:?}", self.offset_range)),
            ("drop_path", format!("{:?}", self.drop_path)),
        ])
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn to_kv(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies one `key=value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Format(format!("invalid value for {key}: {value:?}"));
        let list = || -> Result<[usize; 4]> {
            let v: Vec<usize> = value.split(',').map(|s| s.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            v.try_into().map_err(|_| bad())
        };
        let uint = || value.parse::<usize>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        let flag = || value.parse::<bool>().map_err(|_| bad());
        match key {
            "channels" => self.channels = list()?,
            "blocks" => self.blocks = list()?,
            "num_classes" => self.num_classes = uint()?,
            "in_channels" => self.in_channels = uint()?,
            "state_size" => self.state_size = uint()?,
            "expand" => self.expand = uint()?,
            "ffn_ratio" => self.ffn_ratio = uint()?,
            "use_das" => self.use_das = flag()?,
            "use_convpos" => self.use_convpos = flag()?,
            "use_convffn" => self.use_convffn = flag()?,
            "offset_range" => self.offset_range = float()?,
            "drop_path" => self.drop_path = float()?,
            _ => return Err(Error::Format(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// Parses text produced by [`ModelConfig::to_kv`]; every key is required.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::micro();
        let mut seen = std::collections::BTreeSet::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
            seen.insert(k.trim().to_string());
        }
        if let Some(missing) = cfg.entries().keys().find(|k| !seen.contains(**k)) {
            return Err(Error::Format(format!("missing model key {missing:?}")));
        }
        Ok(cfg)
    }

    /// Short hex digest of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "channels {:?} blocks {:?} das={} convpos={} convffn={}",
            self.channels, self.blocks, self.use_das, self.use_convpos, self.use_convffn
        )
    }
}
