//! Checkpoint file: a JSON header plus named, ordered flat parameter segments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Model};
use crate::codec::FeatureSchema;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cyclecast-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub schema_version: String,
    pub architecture: Architecture,
    pub seed: u64,
    /// Training hyperparameters as recorded by the trainer.
    pub hyperparameters: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub segments: Vec<Segment>,
}

impl Checkpoint {
    pub fn new(model: &Model, schema: &FeatureSchema, params: &[f64], seed: u64, hyperparameters: serde_json::Value) -> Self {
        let segments = model
            .segments()
            .into_iter()
            .map(|(name, r)| Segment { name: name.to_string(), values: params[r].to_vec() })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                schema_version: schema.version().to_string(),
                architecture: model.arch.clone(),
                seed,
                hyperparameters,
            },
            segments,
        }
    }

    /// Rebuilds the model and its flat parameters, checking every segment's name and size.
    pub fn restore(&self, schema: &FeatureSchema) -> Result<(Model, Vec<f64>)> {
        if self.header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", self.header.format)));
        }
        if self.header.schema_version != schema.version() {
            return Err(Error::Checkpoint(format!(
                "schema version {} does not match {}",
                self.header.schema_version,
                schema.version()
            )));
        }
        let model = Model::new(self.header.architecture.clone(), schema)?;
        let expected = model.segments();
        if expected.len() != self.segments.len() {
            return Err(Error::Checkpoint(format!("expected {} segments, found {}", expected.len(), self.segments.len())));
        }
        let mut params = Vec::with_capacity(model.param_len());
        for ((name, range), seg) in expected.iter().zip(&self.segments) {
            if seg.name != *name || seg.values.len() != range.len() {
                return Err(Error::Checkpoint(format!(
                    "segment `{}` ({} values) where `{name}` ({} values) was expected",
                    seg.name,
                    seg.values.len(),
                    range.len()
                )));
            }
            if seg.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("segment `{name}` has non-finite values")));
            }
            params.extend_from_slice(&seg.values);
        }
        Ok((model, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
