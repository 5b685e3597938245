//! GSNR-guided structured dropout with meta-learned dropout ratios.
//!
//! A desk-scale experiment harness: a reverse-mode autodiff core over dense
//! f64 tensors, a small block-structured conv classifier, gradient
//! signal-to-noise statistics, the mask-construction pipeline, a
//! meta-learning loop for per-block dropout ratios, synthetic multi-domain
//! data with a leave-one-out protocol, and generalization diagnostics.

pub mod bench;
pub mod checks;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gsnr;
pub mod masking;
pub mod meta;
pub mod network;
pub mod rng;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
