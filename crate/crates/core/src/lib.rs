//! Weights-only low-bit quantization toolkit.
//!
//! The crate covers the full path from float weights to a deployable
//! packed model:
//!
//! - [`quant`] — pure quantize/dequantize transforms: 1-bit absmean
//!   binarization, 1/2-bit absmax-asymmetric quantization, per-channel and
//!   blockwise sub-channel scale grouping, static clipping.
//! - [`autodiff`] — a minimal reverse-mode tape over dense tensors with
//!   straight-through-estimator quantization nodes for fake-quant training.
//! - [`kernels`] — bit-packed code buffers and a deferred-scale matmul that
//!   computes on raw codes and scales the block partial sums.
//! - [`modelpack`] — layer manifests, the `BQW1` packed-model file format,
//!   int8 double quantization of scale metadata and the model-size
//!   estimator.
//! - [`harness`] — small-scale quantization-aware training experiments on a
//!   synthetic sequence-classification task.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod modelpack;
pub mod quant;

pub use error::{Error, Result};
pub use kernels::{PackedBits, PackedLayer};
pub use modelpack::{LayerSpec, MetaDtype, ModelManifest, SizeReport};
pub use quant::{Granularity, QuantMode, QuantScheme, QuantizedTensor};
