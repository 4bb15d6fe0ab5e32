//! Analytic parameter and FLOP counts.
//!
//! FLOPs follow the convention of the usual vision-model tables: one
//! multiply-accumulate is one FLOP, biases, normalizations, activations and
//! other elementwise work are not counted. Doubling gives the stricter
//! "multiply and add counted separately" figure.

use super::config::ModelConfig;
use super::net::param_specs;
use crate::ssm::delta_rank;

/// Multiply-accumulates per token, channel and state in the selective scan:
/// `B̄ = gain·B`, `Ā·h`, `B̄·x` and `C·h`.
pub const SCAN_MACS_PER_STATE: u64 = 4;

/// Bilinear sampling reads four corners per output value.
pub const SAMPLE_MACS_PER_VALUE: u64 = 4;

pub fn count_params(cfg: &ModelConfig) -> u64 {
    param_specs(cfg).iter().map(|s| s.numel() as u64).sum()
}

fn conv_macs(h: u64, w: u64, cin_per_group: u64, cout: u64) -> u64 {
    h * w * 9 * cin_per_group * cout
}

fn block_macs(cfg: &ModelConfig, l: u64, c: u64) -> u64 {
    let e = cfg.expand as u64 * c;
    let n = cfg.state_size as u64;
    let r = delta_rank(e as usize) as u64;
    let hid = cfg.ffn_ratio as u64 * c;
    let mut macs = 0;
    if cfg.use_convpos {
        macs += l * 9 * c;
    }
    macs += l * c * 2 * e;
    macs += l * 9 * e;
    if cfg.use_das {
        macs += l * 9 * e + l * e * 2 + l * e * SAMPLE_MACS_PER_VALUE;
    }
    macs += l * (e * r + r * e + 2 * e * n);
    macs += l * e * n * SCAN_MACS_PER_STATE;
    macs += l * e * c;
    macs += l * c * hid * 2;
    if cfg.use_convffn {
        macs += l * 9 * hid;
    }
    macs
}

/// Forward FLOPs for one `h × w` image (one multiply-accumulate = 1).
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let (h, w) = (h as u64, w as u64);
    let c: Vec<u64> = cfg.channels.iter().map(|&c| c as u64).collect();
    let half = c[0] / 2;
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let (mut hs, mut ws) = (h2.div_ceil(2), w2.div_ceil(2));
    let mut total = conv_macs(h2, w2, cfg.in_channels as u64, half)
        + conv_macs(h2, w2, half, half)
        + conv_macs(hs, ws, half, c[0])
        + conv_macs(hs, ws, c[0], c[0]);
    for stage in 0..4 {
        if stage > 0 {
            hs = hs.div_ceil(2);
            ws = ws.div_ceil(2);
            total += conv_macs(hs, ws, c[stage - 1], c[stage]);
        }
        total += cfg.blocks[stage] as u64 * block_macs(cfg, hs * ws, c[stage]);
    }
    total + c[3] * cfg.num_classes as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_params() {
        // the head contributes exactly D·K + K
        let mut cfg = ModelConfig::micro();
        let base = count_params(&cfg);
        cfg.num_classes += 1;
        assert_eq!(count_params(&cfg) - base, 64 + 1);
    }

    #[test]
    fn toggles_change_counts() {
        let full = ModelConfig::micro();
        let base = ModelConfig::micro().with_toggles(false, false, false);
        assert!(count_params(&full) > count_params(&base));
        assert!(count_flops(&full, 64, 64) > count_flops(&base, 64, 64));
    }

    #[test]
    fn flops_scale_with_area() {
        let cfg = ModelConfig::tiny();
        let a = count_flops(&cfg, 224, 224) as f64;
        let b = count_flops(&cfg, 448, 448) as f64;
        assert!((b / a - 4.0).abs() < 0.05);
    }
}
