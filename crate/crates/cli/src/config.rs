//! Run configuration: built-in defaults, then the TOML file given with
//! `--config`, then command line flags.

use std::path::Path;

use pagedep::eval::LabelScoring;
use pagedep::{GeneratorConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub folds: usize,
    pub label_scoring: LabelScoring,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { folds: 3, label_scoring: LabelScoring::LabelOnly }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        toml::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
    }

    /// One seed drives corpus generation, initialisation, shuffling,
    /// dropout and fold assignment.
    pub fn set_seed(&mut self, seed: u64) {
        self.generator.seed = seed;
        self.model.init_seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# not representable as TOML: {e}\n{self:?}\n"))
    }
}
