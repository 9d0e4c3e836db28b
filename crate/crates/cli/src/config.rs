use std::path::Path;

use gpcdl::bench::experiments::ErrorTableSpec;
use gpcdl::bench::sim::{BernoulliSimSpec, SimSpec};
use gpcdl::hyper::HyperConfig;
use gpcdl::learn::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Simulation section, tagged by observation family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Simulation {
    Gaussian(SimSpec),
    Bernoulli(BernoulliSimSpec),
}

impl Simulation {
    pub fn seed(&self) -> u64 {
        match self {
            Simulation::Gaussian(s) => s.seed,
            Simulation::Bernoulli(s) => s.seed,
        }
    }

    pub fn num_samples(&self) -> usize {
        match self {
            Simulation::Gaussian(s) => s.num_samples,
            Simulation::Bernoulli(s) => s.num_samples,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossvalSpec {
    pub lengthscales: Vec<f64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_folds() -> usize {
    3
}

/// The single JSON document every subcommand reads. Each subcommand needs
/// only some sections.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub simulation: Option<Simulation>,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    /// Replace a Gaussian dispersion by the high-frequency noise estimate
    /// of the training data.
    #[serde(default)]
    pub estimate_dispersion: bool,
    #[serde(default)]
    pub crossval: Option<CrossvalSpec>,
    #[serde(default)]
    pub hyper: Option<HyperConfig>,
    #[serde(default)]
    pub table: Option<ErrorTableSpec>,
}

fn missing(section: &str) -> CliError {
    CliError::input(format!("config is missing the \"{section}\" section"))
}

impl RunConfig {
    pub fn simulation(&self) -> CliResult<&Simulation> {
        self.simulation.as_ref().ok_or_else(|| missing("simulation"))
    }

    pub fn experiment(&self) -> CliResult<&ExperimentConfig> {
        self.experiment.as_ref().ok_or_else(|| missing("experiment"))
    }

    pub fn crossval(&self) -> CliResult<&CrossvalSpec> {
        self.crossval.as_ref().ok_or_else(|| missing("crossval"))
    }

    pub fn table(&self) -> CliResult<&ErrorTableSpec> {
        self.table.as_ref().ok_or_else(|| missing("table"))
    }

    pub fn hyper(&self) -> HyperConfig {
        self.hyper.unwrap_or_default()
    }

    fn validate(&self) -> CliResult<()> {
        match &self.simulation {
            Some(Simulation::Gaussian(s)) => s.validate()?,
            Some(Simulation::Bernoulli(s)) => s.validate()?,
            None => {}
        }
        if let Some(e) = &self.experiment {
            e.validate()?;
        }
        if let Some(cv) = &self.crossval {
            if cv.lengthscales.is_empty() {
                return Err(CliError::input("crossval.lengthscales must not be empty"));
            }
            if cv.folds < 2 {
                return Err(CliError::input("crossval.folds must be at least 2"));
            }
        }
        Ok(())
    }
}

/// A parsed and validated config with the SHA-256 of its bytes.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub sha256: String,
}

pub fn load(path: &Path) -> CliResult<LoadedConfig> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::input(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(LoadedConfig {
        config,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}
