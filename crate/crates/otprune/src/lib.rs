//! Channel pruning toolkit built around batch-norm scaling factors.
//!
//! The crate covers the full compression loop for small convolutional
//! classifiers:
//!
//! * [`graph`] — a typed network IR with validation, inference, complexity
//!   accounting, serialization, and reference architectures;
//! * [`train`] — a reverse-mode training engine with an L1 penalty on
//!   batch-norm scales, fine-tuning, and a finite-difference gradient check;
//! * [`threshold`] — per-layer threshold selection on the trained scale
//!   distributions, the global-percentile baseline, and separation
//!   diagnostics;
//! * [`surgery`] — applying a prune plan: channel removal, branch removal,
//!   channel-select masking, and before/after reporting;
//! * [`data`] — synthetic blob datasets and a CIFAR-10 binary loader;
//! * [`pipeline`] — the train, prune, recover driver behind the CLI,
//!   including iterative pruning, threshold-shift sweeps, and method
//!   comparison runs.

pub mod data;
pub mod graph;
pub mod pipeline;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod threshold;
pub mod train;

pub use graph::{build_preset, load, save, NetworkGraph, Preset};
pub use tensor::Tensor;
