//! Versioned JSON model files.
//!
//! ```json
//! { "schema_version": "1", "model_kind": "pim", "payload": { ... },
//!   "metadata": { "config": { ... }, "seed": 7 } }
//! ```
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same `f64`, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EmConfig;
use crate::error::{PimError, Result};
use crate::grid::CategoricalGrid;
use crate::hmm::PimHmm;
use crate::pim::PimModel;
use crate::tmpim::TmpimModel;

pub const SCHEMA_VERSION: &str = "1";

/// The stored model, tagged by `model_kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_kind", content = "payload", rename_all = "snake_case")]
pub enum ModelPayload {
    Pim(PimModel),
    Tmpim(TmpimModel),
    PimHmm(PimHmm),
}

impl ModelPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelPayload::Pim(_) => "pim",
            ModelPayload::Tmpim(_) => "tmpim",
            ModelPayload::PimHmm(_) => "pim_hmm",
        }
    }

    /// Re-checks invariants that deserialization alone does not enforce.
    pub fn validate(&self) -> Result<()> {
        let grid_ok = |g: &CategoricalGrid| {
            CategoricalGrid::new(g.height(), g.width(), g.size(), g.probs().to_vec()).map(|_| ())
        };
        match self {
            ModelPayload::Pim(m) => {
                grid_ok(&m.prior)?;
                if m.prior.size() != m.palette_size {
                    return Err(PimError::InvalidInput(
                        "prior size disagrees with palette size".into(),
                    ));
                }
                Ok(())
            }
            ModelPayload::Tmpim(m) => {
                m.class_pims.iter().try_for_each(grid_ok)?;
                m.validate()
            }
            ModelPayload::PimHmm(m) => m.validate(),
        }
    }
}

/// Training configuration echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub config: EmConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: String,
    #[serde(flatten)]
    pub model: ModelPayload,
    pub metadata: ModelMetadata,
}

impl ModelFile {
    pub fn new(model: ModelPayload, config: &EmConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            model,
            metadata: ModelMetadata {
                config: config.clone(),
                seed: config.seed,
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(PimError::InvalidInput(format!(
                "unsupported model schema version `{}` (expected `{SCHEMA_VERSION}`)",
                file.schema_version
            )));
        }
        file.model.validate()?;
        Ok(file)
    }
}

pub fn save_model(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    fs::write(path, file.to_json()?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    ModelFile::from_json(&fs::read_to_string(path)?)
}
