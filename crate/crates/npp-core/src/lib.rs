//! Dual-precision inference toolkit.
//!
//! The library splits a network's arithmetic into exactly two precision
//! levels: an ultra-low-precision main path (INT8/FP4/NF4 weights, optional
//! 4/8-bit activations, optionally executed on a simulated bitplane
//! in-memory crossbar) and high-precision low-rank correction paths trained
//! against the frozen degraded base. Around that sit process-variability
//! injection, gradient-based retraining-sample selection, a
//! block-floating-point datapath emulator, analytical energy accounting, and
//! a reproducible experiment harness.
//!
//! Modules:
//! - [`tensor`], [`model`], [`train`]: dense FP64 core with reverse-mode
//!   gradients and SGD training.
//! - [`quant`]: INT8/FP4/NF4 quantizers and whole-model fake quantization.
//! - [`variability`]: multiplicative Gaussian weight perturbation.
//! - [`lora`]: low-rank adapter pairs, attachment, merging, accounting.
//! - [`sensitivity`]: gradient-magnitude sample scoring and selection.
//! - [`cim`]: bitplane crossbar simulator with 1-bit comparators.
//! - [`bfp`]: block-floating-point dot products with explicit exponent
//!   alignment.
//! - [`energy`]: MAC counts, per-path energy, TOPS/W.
//! - [`data`], [`checkpoint`], [`harness`]: datasets, the `npp-ckpt-1`
//!   container, and the end-to-end experiment driver.

pub mod bfp;
pub mod checkpoint;
pub mod cim;
pub mod data;
pub mod energy;
pub mod error;
pub mod harness;
pub mod lora;
pub mod model;
pub mod pool;
pub mod quant;
pub mod rng;
pub mod sensitivity;
pub mod tensor;
pub mod train;
pub mod variability;

pub use error::{Error, Result};
pub use model::{Activation, Batch, DenseModel, ForwardMode, LinearLayer, SurrogatePath};
pub use tensor::Tensor;
