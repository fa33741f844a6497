//! Feature extraction and prediction over discrete temporal activity logs.
//!
//! The pipeline turns per-user activity events (card/POS/web transactions with
//! categorical attributes and a location) into fixed-length feature vectors,
//! trains a bank of per-branch regressors to predict each user's five most
//! visited branches, and trains binary classifiers for credit-card up-sell.
//!
//! Modules, bottom up:
//!
//! * [`data`]: CSV ingestion, missing-value rules, category encodings.
//! * [`features`]: cumulative feature sets `FS1`..`FS10`.
//! * [`clustering`]: seeded k-means over home locations.
//! * [`models`]: trees, boosting, forests, linear models, the branch bank.
//! * [`eval`]: cosine top-5 score, ROC AUC, k-fold cross validation.
//! * [`datagen`]: synthetic data with planted, recoverable signal.
//! * [`pipeline`] and [`config`]: end-to-end orchestration used by the CLI.

pub mod clustering;
pub mod config;
pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod features;
pub mod matrix;
pub mod models;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};

/// Number of days in the observation window (first half of 2014).
pub const HORIZON_DAYS: u32 = 181;
