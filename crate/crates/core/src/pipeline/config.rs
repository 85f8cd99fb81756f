use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder3d::{PretrainConfig, ViTConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionTrainConfig;
use crate::metrics::MetricsConfig;
use crate::multirater::{ClassifierConfig, ConsensusOptions};
use crate::synthgen::GenConfig;
use crate::volprep::PrepConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusConfig {
    pub classifier: ClassifierConfig,
    pub options: ConsensusOptions,
}

/// Whole-run configuration. Missing keys take desk defaults; unknown keys
/// are rejected. The top-level `seed` drives every stage and overrides the
/// per-stage `data.seed` and `metrics.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: GenConfig,
    pub prep: PrepConfig,
    pub encoder: ViTConfig,
    pub pretrain: PretrainConfig,
    pub consensus: ConsensusConfig,
    pub fusion: FusionTrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            experiment: "desk".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            data: GenConfig::default(),
            prep: PrepConfig::default(),
            encoder: ViTConfig::default(),
            pretrain: PretrainConfig::default(),
            consensus: ConsensusConfig::default(),
            fusion: FusionTrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn normalized(mut self) -> Self {
        self.data.seed = self.seed;
        self.metrics.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.experiment.is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        self.data.validate()?;
        self.prep.validate()?;
        self.encoder.validate()?;
        self.encoder.grid(self.prep.crop)?;
        self.pretrain.validate()?;
        self.consensus.classifier.validate()?;
        if let Some(w) = self.consensus.options.model_weight_override {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("model_weight_override must be ≥ 0, got {w}")));
            }
        }
        self.fusion.validate()?;
        if self.metrics.n_bootstrap < 2 {
            return Err(Error::Config("metrics.n_bootstrap must be ≥ 2".into()));
        }
        Ok(())
    }
}
