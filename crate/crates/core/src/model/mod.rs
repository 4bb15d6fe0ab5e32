//! The DAS block, the four-stage backbone and its bookkeeping.
//!
//! Tensors are channels-last: images are `[B, H, W, 3]`.

mod checkpoint;
mod config;
mod count;
mod net;
mod params;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use count::{count_flops, count_params, SAMPLE_MACS_PER_VALUE, SCAN_MACS_PER_STATE};
pub use net::{
    block_forward, block_prefix, param_specs, stem, BlockOutput, DasTrace, ForwardOutput, Model, Mode, BN_MOMENTUM,
};
pub use params::{param_rng, Init, ParamSpec, ParamStore};
