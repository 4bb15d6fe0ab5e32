//! Dynamic adaptive scan (DAS) vision state-space models on a small
//! from-scratch autodiff engine.
//!
//! The crate is organised bottom-up: [`tensor`] provides dense tensors with
//! reverse-mode differentiation, [`ssm`] the selective scan, [`sampler`]
//! normalized-coordinate bilinear resampling, [`scan`] the scan strategies,
//! [`model`] the block and backbone, and [`harness`] training and the
//! ablation experiment.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod sampler;
pub mod scan;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
