//! Wavelet-convolution transformer for multi-channel sEMG gesture windows.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`] — dense row-major tensors with a tape-based reverse-mode
//!   autodiff graph. Single-threaded and deterministic by contract.
//! - [`signal`] — recordings, channel-wise z-score normalization, sliding
//!   window segmentation, a synthetic gesture generator and CSV ingestion.
//! - [`wavelet`] — patch embedding plus the learnable wavelet convolution:
//!   multi-level filter-bank decomposition, per-subband refinement,
//!   selective high-frequency dropout and reconstruction with a residual
//!   depthwise path.
//! - [`encoder`] — token sequence construction, rotary-embedding multi-head
//!   attention, pre-norm transformer blocks and the classification head.
//! - [`model`] — the assembled classifier and its parameter registry.
//! - [`train`] — AdamW with warmup, global-norm clipping and early stopping;
//!   [`metrics`] for accuracy / macro-F1 / macro one-vs-rest AUROC.
//! - [`quant`] / [`infer`] / [`bench`] — post-training INT8 quantization,
//!   a graph-free inference engine and the latency benchmark harness.
//! - [`checkpoint`] / [`runconfig`] — the binary checkpoint format and the
//!   flat key-value run configuration.

pub mod bench;
pub mod checkpoint;
pub mod encoder;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod rng;
pub mod runconfig;
pub mod signal;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use model::{Model, ModelConfig};
pub use tensor::{Graph, Scalar, Tensor, TensorError, Var};
