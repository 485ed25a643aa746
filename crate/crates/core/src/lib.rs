//! Post-hoc out-of-distribution detection over exported embeddings.
//!
//! Bundles of NPY embeddings plus a linear classifier head go in; scores,
//! AUROC tables and thresholds come out. All scores are oriented so that
//! larger means more in-distribution.

pub mod detectors;
pub mod error;
pub mod eval;
pub mod knn;
pub mod linalg;
pub mod store;
pub mod synth;

pub use detectors::{fit_on_bundle, DetectorSpec, FittedDetector, Method, Score};
pub use error::{Error, Result};
pub use store::{load_bundle, EmbeddingBundle};
