//! Run configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::ControllerSettings;
use crate::sim::Scenario;
use crate::tank_model::{OperatingPoint, TankParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tank: TankParams,
    /// Level the linear controller is linearized at [m].
    pub operating_level: f64,
    /// Seed for the measurement-noise generator.
    pub seed: u64,
    pub output_dir: String,
    pub scenario: Scenario,
    pub lmpc: ControllerSettings,
    pub nmpc: ControllerSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tank: TankParams::default(),
            operating_level: 0.4,
            seed: 0,
            output_dir: "output".to_string(),
            scenario: Scenario::default(),
            lmpc: ControllerSettings::default(),
            nmpc: ControllerSettings::default(),
        }
    }
}

impl RunConfig {
    /// Reads a configuration file; `"default"` yields the built-in one.
    pub fn load(path: &str) -> Result<Self, ConfigError> {
        if path == "default" {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(Path::new(path)).map_err(|source| ConfigError::Io {
            path: path.to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.tank.validate().map_err(|e| invalid(&e))?;
        OperatingPoint::at_level(&self.tank, self.operating_level).map_err(|e| invalid(&e))?;
        if !(self.operating_level > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "operating level {} must be positive",
                self.operating_level
            )));
        }
        for (name, c) in [("lmpc", &self.lmpc), ("nmpc", &self.nmpc)] {
            c.ocp
                .validate_for(&self.tank)
                .map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
            if !(0.0..=1.0).contains(&c.estimator_gain) {
                return Err(ConfigError::Invalid(format!(
                    "{name}: estimator gain {} outside [0, 1]",
                    c.estimator_gain
                )));
            }
        }
        self.scenario
            .validate(&self.tank)
            .map_err(|e| invalid(&e))?;
        let u0 = self
            .scenario
            .initial_flow(&self.tank)
            .map_err(|e| invalid(&e))?;
        for (name, c) in [("lmpc", &self.lmpc), ("nmpc", &self.nmpc)] {
            if !(u0 >= c.ocp.flow_min && u0 <= c.ocp.flow_max) {
                return Err(ConfigError::Invalid(format!(
                    "{name}: initial input {u0} outside the flow bounds"
                )));
            }
        }
        Ok(())
    }
}
