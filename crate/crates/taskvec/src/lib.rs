//! Distill transformer teachers into compact students, turn the trained
//! students into task vectors, merge those vectors (linear interpolation,
//! plain averaging, or trim/elect/merge), and evaluate every model with
//! linear probes over synthetic two-domain signal data.
//!
//! The crate is organized around a small set of pieces:
//!
//! - [`tensor`] / [`autodiff`] / [`optim`]: dense f32 math with reverse-mode
//!   differentiation and Adam, enough to train the toy models here.
//! - [`checkpoint`]: a safetensors-compatible container with provenance
//!   metadata and content digests.
//! - [`model`]: convolution-frontend transformer encoders (teacher and
//!   student) with per-layer hidden-state extraction.
//! - [`data`]: deterministic generators for two labeled signal domains.
//! - [`distill`]: teacher training and multi-head hidden-state distillation.
//! - [`merge`]: task-vector extraction and the merge strategies.
//! - [`eval`]: linear probes, score aggregation, and interpolation sweeps.
//!
//! The `taskvec` binary wires these into a reproducible experiment pipeline.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Entry point used by the `taskvec` binary. Returns the process exit code.
pub fn run_cli() -> i32 {
    0 // replaced by the cli module once the pipeline lands
}
