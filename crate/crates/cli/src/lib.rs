//! Experiment orchestration around the `cgfedrec` simulator: dataset
//! plumbing, single runs with early stopping, hyper-parameter grids, the
//! broadcast-mode ablation suite, the privacy-noise sweep, and file artifact
//! emission. The binary in `main.rs` is a thin argument layer over this
//! library so tests can drive the exact same code paths in-process.

pub mod output;
pub mod runner;
pub mod spec;
