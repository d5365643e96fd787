use std::fs;
use std::path::Path;

use cipa_core::data::SynthSpec;
use cipa_core::net::CipaConfig;
use cipa_core::train::TrainConfig;
use cipa_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a command needs, read from one JSON file. Missing sections
/// fall back to the desk-scale defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: CipaConfig,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    /// Write a checkpoint every this many steps (0 keeps only the final one).
    pub checkpoint_every: u64,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// A seed override applies to both data generation and training.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.train.validate()?;
        if self.synth.resolution != self.model.resolution {
            return Err(Error::Config(format!(
                "synthetic resolution {} differs from the model's {}",
                self.synth.resolution, self.model.resolution
            )));
        }
        Ok(())
    }
}
