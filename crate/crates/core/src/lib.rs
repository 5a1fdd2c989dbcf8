//! Incremental person re-identification by low-rank sparse
//! similarity-dissimilarity metric learning.
//!
//! * [`metric`] scores probe/gallery pairs and evaluates the hinge objective.
//! * [`admm`] trains a model by stochastic ADMM, off-line or warm-started.
//! * [`platt`] and [`dominant`] pick the gallery persons worth labeling for a
//!   probe through dominant-set clustering of a calibrated similarity graph.
//! * [`adaptation`] runs the batch-incremental human-in-the-loop update.
//! * [`data`], [`eval`] and [`checkpoint`] cover ingestion, CMC/mAP
//!   evaluation and persistence.

pub mod adaptation;
pub mod admm;
pub mod checkpoint;
pub mod data;
pub mod dominant;
pub mod error;
pub mod eval;
pub mod metric;
pub mod platt;

pub use error::{Error, Result};
pub use metric::{FeatureRecord, Label, LabelSource, LabeledPair, ModelState};
