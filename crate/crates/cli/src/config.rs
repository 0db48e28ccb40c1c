//! Experiment configuration: human-readable `key = value` sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

pub const MAX_EXACT_STEPS: usize = 16;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub backend: BackendSection,
    /// Named tolerance overrides; unknown names are rejected at run time.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default)]
    pub market: MarketSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub problem: String,
    pub grid_sizes: Vec<usize>,
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub n_paths: usize,
    pub basis_degree: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            n_paths: 4096,
            basis_degree: 3,
        }
    }
}

/// Market parameters shared by the finance experiments.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketSection {
    pub rho: f64,
    pub alpha: f64,
    pub beta_vol: f64,
    pub x0: f64,
    pub gamma: f64,
    pub risk_rate: f64,
    pub k2: f64,
}

impl Default for MarketSection {
    fn default() -> Self {
        Self {
            rho: 0.04,
            alpha: 0.08,
            beta_vol: 0.3,
            x0: 1.0,
            gamma: 1.0,
            risk_rate: 0.3,
            k2: 0.25,
        }
    }
}

fn default_backend() -> String {
    "exact-tree".into()
}

fn default_seed() -> u64 {
    42
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_horizon() -> f64 {
    1.0
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ConfigFile = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let sizes = &self.experiment.grid_sizes;
        if sizes.is_empty() {
            return Err(CliError::Config("grid_sizes must not be empty".into()));
        }
        if sizes.iter().any(|n| *n == 0) {
            return Err(CliError::Config("grid sizes must be positive".into()));
        }
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config(
                "grid sizes must be strictly increasing".into(),
            ));
        }
        if self.experiment.backend == "exact-tree"
            && sizes.iter().any(|n| *n > MAX_EXACT_STEPS)
        {
            return Err(CliError::Config(format!(
                "exact-tree grid sizes are capped at {MAX_EXACT_STEPS}"
            )));
        }
        if !(self.experiment.horizon > 0.0) {
            return Err(CliError::Config("horizon must be positive".into()));
        }
        Ok(())
    }
}
