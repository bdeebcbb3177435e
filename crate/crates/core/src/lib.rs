//! Deterministic single-process simulator of CGFedRec: federated
//! recommendation where the server clusters aggregated item embeddings and
//! broadcasts only the cluster labels, which clients turn into a contrastive
//! regularizer on their private embedding tables.
//!
//! Everything is seeded: the same `(config, seed)` pair produces bitwise
//! identical models, metrics, reports, and communication ledgers regardless
//! of how many rayon workers run the per-client training.

pub mod comms;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod federation;
pub mod model;
pub mod rng;
pub mod structure;
pub mod synthetic;

pub use error::{Error, Result};
