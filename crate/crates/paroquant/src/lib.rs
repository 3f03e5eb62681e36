//! Pairwise rotation quantization.
//!
//! Weight-only post-training quantization built from three pieces: group-wise
//! low-bit RTN quantization, an equivalent weight transform made of per-channel
//! scaling plus short series of independent Givens rotations, and a two-stage
//! layer-wise calibration loop that tunes the transform first and the weights
//! and quantizer parameters second. The transform is invertible, so the layer
//! output is preserved exactly: `X·W == (X·T⁻¹)·(T·W)`; only the quantization
//! error of `T·W` remains.
//!
//! Modules map one-to-one onto the pipeline stages:
//!
//! - [`tensor`]: dense FP32 matrices, channel-group partitioning, the
//!   deterministic PRNG, and the `PQT1` tensor container format.
//! - [`quant`]: group-wise RTN quantize/dequantize and the differentiable
//!   fake-quant forward with straight-through-estimator gradients.
//! - [`transform`]: pair selection, Givens application, and the composed
//!   scaled pairwise rotation bundle.
//! - [`baselines`]: reference transforms (channel scaling, full rotation via
//!   the matrix exponential, randomized Walsh–Hadamard) and the output-error
//!   comparison harness.
//! - [`optim`]: Huber loss, hand-derived reverse-mode gradients, AdamW, and
//!   the cosine learning-rate schedule.
//! - [`calibrate`]: synthetic toy decoder layers, calibration data, and the
//!   layer-wise two-stage optimization loop.
//! - [`engine`]: deployed-mode inference (fused inverse transform plus
//!   dequantizing matvec) and the transform micro-benchmark.
//!
//! The `parallel` feature (default on) drives the data-parallel inner loops
//! with rayon; without it every loop falls back to the identical sequential
//! code path. Results are bitwise identical either way: every accumulated
//! scalar is owned by exactly one task and summed in a fixed order with FP64
//! accumulators.

pub mod baselines;
pub mod calibrate;
pub mod engine;
pub mod optim;
pub mod quant;
pub mod tensor;
pub mod transform;

mod parallel;

use thiserror::Error;

/// Error type shared by all modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
