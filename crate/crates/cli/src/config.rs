//! Run configuration: a JSON file whose values are overridden by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smmil::curriculum::CurriculumConfig;
use smmil::data::GeneratorConfig;
use smmil::metrics::DEFAULT_BOOTSTRAP_SAMPLES;
use smmil::model::ModelConfig;
use smmil::train::TrainConfig;
use smmil::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    /// Never echoed: the echo is written inside it.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_boot: usize,
    /// Split scored by `predict`, and by `eval` when it predicts in-process.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_boot: DEFAULT_BOOTSTRAP_SAMPLES,
            split: "test".into(),
        }
    }
}

/// Everything a command needs. `seed` drives every random stream and
/// replaces the section-level `data.seed` and `train.seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub paths: Paths,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumConfig,
    pub eval: EvalConfig,
    /// `ssl` trains on the labeled split only.
    pub ablate_ssl: bool,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fixes the command and seed and checks the sections that command uses.
    pub fn resolve(mut self, command: &str) -> Result<Self> {
        let seed = self
            .seed
            .ok_or_else(|| Error::Usage("a seed is required (--seed or \"seed\" in the config file)".into()))?;
        self.command = Some(command.to_string());
        self.data.seed = seed;
        self.train.seed = seed;
        match command {
            "gen-data" => self.data.validate()?,
            "train" | "ssl" => {
                self.model.validate()?;
                self.train.validate()?;
            }
            _ => {}
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved")
    }

    pub fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        path.clone().ok_or_else(|| Error::Usage(format!("{flag} is required")))
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Self::require(&self.paths.out, "--out")
    }

    /// Writes the resolved configuration as `config.json` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        let path = dir.join("config.json");
        std::fs::write(&path, text + "\n").map_err(|source| Error::Io { path, source })
    }
}
