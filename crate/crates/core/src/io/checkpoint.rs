//! JSON checkpoints for fitted MSM and SDS models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::msm::MsmModel;
use crate::sds::SdsModel;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum CheckpointModel {
    Msm(MsmModel),
    Sds(SdsModel),
}

impl CheckpointModel {
    /// The MSM itself, or the latent prior of an SDS.
    pub fn prior(&self) -> &MsmModel {
        match self {
            CheckpointModel::Msm(m) => m,
            CheckpointModel::Sds(s) => &s.prior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CheckpointModel::Msm(m) => m.validate(),
            CheckpointModel::Sds(s) => s.validate(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub stage: String,
    pub seed: u64,
    /// Hex SHA-256 of the training configuration JSON.
    pub config_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model: CheckpointModel,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn new(model: CheckpointModel, metadata: TrainingMetadata) -> Self {
        Checkpoint { schema_version: CHECKPOINT_SCHEMA, model, metadata }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates the model invariants.
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Format(format!("unsupported checkpoint schema {}", c.schema_version)));
        }
        c.model.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}
