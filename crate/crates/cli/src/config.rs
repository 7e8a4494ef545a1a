//! Run configuration: one JSON document covering every phase, each section
//! optional and defaulted, with CLI flags overriding file values. The fully
//! resolved config is written into every run directory.

use serde::{Deserialize, Serialize};
use std::path::Path;
use streamgate::controller::ErasureConfig;
use streamgate::error::{Error, Result};
use streamgate::flow::{Dataset, TrainConfig};
use streamgate::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Euler integration steps.
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 9, n_samples: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Probes per layer/head for the localization profile.
    pub loc_probes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { steps: 9, n_samples: 200, seed: 0, loc_probes: 16 }
    }
}

/// The whole experiment spec. Sections not present in the file take their
/// documented defaults, so `{}` is a valid config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub dataset: Dataset,
    pub train: TrainConfig,
    pub erase: ErasureConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl RunSpec {
    pub fn load(path: Option<&Path>) -> Result<RunSpec> {
        match path {
            None => Ok(RunSpec::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.sample.steps == 0 || self.eval.steps == 0 {
            return Err(Error::config("sampler steps must be positive"));
        }
        if self.sample.n_samples == 0 || self.eval.n_samples == 0 {
            return Err(Error::config("sample counts must be positive"));
        }
        Ok(())
    }

    /// Writes the fully resolved spec next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("config.json"), text)?;
        Ok(())
    }
}
