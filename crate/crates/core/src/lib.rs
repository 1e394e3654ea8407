//! Forecasting-based anomaly prediction for multivariate sensor traces.
//!
//! A forecaster (per-variable N-BEATS or a graph-attention network) is
//! trained on clean process runs; its forecasts of an unseen run are
//! compared with forecasts of the training runs and points whose deviation
//! exceeds a threshold are flagged.

pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod graphnet;
pub mod harness;
pub mod nbeats;
pub mod numcore;
pub mod synth;
pub mod training;

pub use dataset::{NormalizationRecord, Trace, WindowBatch};
pub use error::{Error, ErrorClass, Result};
pub use numcore::{Checkpoint, ParamStore, Tape, Tensor};
pub use detector::{DetectionConfig, DetectionReport, Metrics};
pub use config::{validate_config, RunConfig};
pub use harness::{ExperimentPlan, ModelKind, ResultTable};
pub use synth::{AnomalySpec, RecipeSpec};
pub use training::{Predictor, TrainingConfig};
