//! The full set of tunable defaults, grouped per module.
//!
//! Every field has a default, so a configuration file only needs the values
//! it overrides.

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineConfig;
use crate::error::{Error, Result};
use crate::neural::{NeuralConfig, TrainConfig};
use crate::optimize::{AdamConfig, GridConfig};
use crate::param::ParamConfig;
use crate::preprocess::PreprocessConfig;
use crate::synth::SuiteConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub param: ParamConfig,
    /// Refinement used by sharpening and the grid-search polish.
    pub adam: AdamConfig,
    pub grid: GridConfig,
    pub baseline: BaselineConfig,
    pub preprocess: PreprocessConfig,
    pub neural: NeuralConfig,
    pub train: TrainConfig,
    pub synth: SuiteConfig,
    /// A detection counts as found when `l_left + l_right` is below this.
    pub acceptance_threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            param: ParamConfig::default(),
            adam: AdamConfig::default(),
            grid: GridConfig::default(),
            baseline: BaselineConfig::default(),
            preprocess: PreprocessConfig::default(),
            neural: NeuralConfig::default(),
            train: TrainConfig::default(),
            synth: SuiteConfig::default(),
            acceptance_threshold: 0.10,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.param.validate()?;
        self.adam.validate()?;
        self.grid.validate()?;
        self.baseline.validate()?;
        self.preprocess.validate()?;
        self.neural.validate()?;
        self.train.validate()?;
        if !(self.acceptance_threshold > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "acceptance threshold {}",
                self.acceptance_threshold
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}
