//! Cycle-level pregnancy prediction from menstrual-tracking logs.
//!
//! Logs are parsed and filtered by [`ingest`], cut into labeled cycles by
//! [`cycles`] and encoded by [`codec`]. [`predictors`] holds the four models,
//! [`trainer`] fits them, [`metrics`] scores them and [`explain`] attributes
//! their predictions to cycle days. [`synth`] generates cohorts with planted
//! ground truth; [`pipeline`] runs ingest through encoding end to end.

pub mod codec;
pub mod cycles;
pub mod error;
pub mod explain;
pub mod ingest;
pub mod linmodel;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod predictors;
pub mod synth;
pub mod trainer;

pub use codec::{EncodedExample, FeatureId, FeatureSchema, SexType};
pub use cycles::{Cycle, Label, LabeledCycle};
pub use error::{Error, Result};
pub use ingest::{DailyLog, LogValue, QcReport, UserProfile};
pub use metrics::EvalResult;
pub use pipeline::{Prepared, PrepareOptions};
pub use predictors::{Checkpoint, Model, ModelKind};
pub use synth::{PlantedTruth, Process, WorldSpec};
pub use trainer::{HyperParams, Split, TrainReport};
