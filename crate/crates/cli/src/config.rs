//! Run configuration. Every key has a default, so an empty file is a valid
//! configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use trialemu::cohort::{CohortRules, CovariateSpec, Outcome};
use trialemu::evaluation::BootstrapPlan;
use trialemu::ingest::{EventSchema, SpawnRules};
use trialemu::synthetic::DgpSpec;
use trialemu::{ModelConfig, ModelTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub events: PathBuf,
    /// Cohort read by `estimate` and `evaluate`; `<out>/cohort.csv` when unset.
    pub cohort: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { events: "events.csv".into(), cohort: None, out: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Estimation {
    pub outcome: String,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub models: Vec<String>,
}

impl Default for Estimation {
    fn default() -> Self {
        Self {
            outcome: "early".into(),
            test_fraction: 0.2,
            validation_fraction: 0.3,
            models: ModelTag::ALL.iter().map(|m| m.tag().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub schema: EventSchema,
    pub spawn: SpawnRules,
    pub covariates: CovariateSpec,
    pub cohort: CohortRules,
    pub estimation: Estimation,
    pub models: ModelConfig,
    pub bootstrap: BootstrapPlan,
    pub simulate: DgpSpec,
}

/// Which part of a configuration was rejected; decides the exit code.
#[derive(Debug)]
pub enum ConfigError {
    Unreadable(String),
    Invalid(String),
    Tag(String),
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Unreadable(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError::Invalid(format!("config {}: {e}", path.display())))
    }

    pub fn outcome(&self) -> Result<Outcome, ConfigError> {
        self.estimation.outcome.parse().map_err(|e: trialemu::Error| ConfigError::Invalid(e.to_string()))
    }

    pub fn model_tags(&self) -> Result<Vec<ModelTag>, ConfigError> {
        if self.estimation.models.is_empty() {
            return Err(ConfigError::Invalid("estimation.models is empty".into()));
        }
        self.estimation
            .models
            .iter()
            .map(|m| m.parse().map_err(|e: trialemu::Error| ConfigError::Tag(e.to_string())))
            .collect()
    }

    /// Checks every section, so that commands fail before writing anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: trialemu::Error| ConfigError::Invalid(e.to_string());
        self.covariates.validate().map_err(invalid)?;
        self.cohort.validate().map_err(invalid)?;
        self.models.validate().map_err(invalid)?;
        self.bootstrap.validate().map_err(invalid)?;
        self.outcome()?;
        self.model_tags()?;
        let (t, v) = (self.estimation.test_fraction, self.estimation.validation_fraction);
        if !(t > 0.0 && t < 1.0 && (0.0..1.0).contains(&v)) {
            return Err(ConfigError::Invalid(format!(
                "test_fraction must lie in (0, 1) and validation_fraction in [0, 1); got {t} and {v}"
            )));
        }
        if self.spawn.margin_hours < 0 || self.spawn.bundle_window_minutes < 0 || self.spawn.bundle_variables.is_empty() {
            return Err(ConfigError::Invalid("spawn rules need bundle variables and non-negative windows".into()));
        }
        Ok(())
    }
}
