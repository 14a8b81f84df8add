//! Sparse high-rank adapter engine.
//!
//! The crate finetunes a small fraction of a pretrained model's weights by
//! masking gradients, extracts the changed weights as a coordinate-indexed
//! sparse adapter, and hot-swaps adapters on a resident model by indexed
//! overwrite instead of dense fusion. A LoRA implementation is included as
//! the baseline the sparse path is benchmarked against.
//!
//! Modules map onto the pipeline:
//!
//! - [`linalg`]: row-major `f64` matrices, a fixed in-repo PRNG, numerical rank.
//! - [`nn`]: a minimal MLP with manual backprop and a finite-difference oracle.
//! - [`mask`]: the five sparsity mask strategies under a parameter budget.
//! - [`adapter`]: sparse and LoRA adapter values, extraction and application.
//! - [`train`]: gradient-masked finetuning with sparse optimizer state.
//! - [`runtime`]: adapter hot-swapping with exact restore, plus latency benches.
//! - [`fusion`]: multi-adapter addition and interference analysis.
//! - [`persist`]: the versioned little-endian adapter/checkpoint file formats.
//! - [`task`]: seeded synthetic classification tasks for experiments.
//!
//! With the default `parallel` feature, batch-level inner loops dispatch to a
//! rayon pool capped by the `SHIRA_THREADS` environment variable; results are
//! bit-identical to the sequential fallback (`--no-default-features`).

pub mod adapter;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod mask;
pub mod nn;
pub mod par;
pub mod persist;
pub mod runtime;
pub mod task;
pub mod train;

pub use error::{Result, ShiraError};
pub use linalg::{DenseMatrix, SeededRng};
