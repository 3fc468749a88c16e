use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use fin_core::sampler::{Hyperparams, ResponseModel};
use fin_core::simulation::ScenarioSpec;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::CliError;

/// Number of factors: fixed, or chosen by the explained-variation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KChoice {
    #[default]
    Auto,
    Fixed(usize),
}

impl FromStr for KChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(KChoice::Auto);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("k must be a positive integer or \"auto\", got {s:?}")),
            Ok(k) => Ok(KChoice::Fixed(k)),
        }
    }
}

impl fmt::Display for KChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KChoice::Auto => write!(f, "auto"),
            KChoice::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for KChoice {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            KChoice::Auto => s.serialize_str("auto"),
            KChoice::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("k must be at least 1")),
            Raw::N(k) => Ok(KChoice::Fixed(k as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Everything `fit` needs. Paths are taken relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    /// Separate covariate table with the same row order as `data`.
    pub covariate_file: Option<PathBuf>,
    /// Two columns, `column` and `lod`, on the raw measurement scale.
    pub lod_file: Option<PathBuf>,
    pub output: PathBuf,
    pub response: String,
    /// Exposure columns; every remaining non-covariate column when empty.
    pub exposures: Vec<String>,
    /// Covariate columns, read from `covariate_file` when given, else from `data`.
    pub covariates: Vec<String>,
    /// Columns transformed by `log10` before standardization.
    pub log10: Vec<String>,
    pub standardize: bool,
    pub k: KChoice,
    /// Threshold of the explained-variation rule for `k = "auto"`.
    pub k_threshold: f64,
    pub n_chains: usize,
    /// Credible level for main effects.
    pub level: f64,
    /// Credible level for interactions; `level` when absent.
    pub interaction_level: Option<f64>,
    /// Polynomial order `Q`; 2 keeps `sampler.response`, larger values use
    /// the diagonal polynomial model.
    pub higher_order: usize,
    /// Also write loadings (rotation ambiguous).
    pub record_lambda: bool,
    pub sampler: Hyperparams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            covariate_file: None,
            lod_file: None,
            output: PathBuf::from("fin-output"),
            response: String::new(),
            exposures: Vec::new(),
            covariates: Vec::new(),
            log10: Vec::new(),
            standardize: true,
            k: KChoice::Auto,
            k_threshold: 0.9,
            n_chains: 1,
            level: 0.95,
            interaction_level: None,
            higher_order: 2,
            record_lambda: false,
            sampler: Hyperparams::default(),
        }
    }
}

fn check_level(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.as_os_str().is_empty() {
            return Err(CliError::Config("no data file given".into()));
        }
        if self.response.is_empty() {
            return Err(CliError::Config("no response column given".into()));
        }
        if self.n_chains == 0 {
            return Err(CliError::Config("n_chains must be at least 1".into()));
        }
        check_level("level", self.level)?;
        check_level("interaction_level", self.interaction_level())?;
        check_level("k_threshold", self.k_threshold)?;
        if self.higher_order == 0 || self.higher_order > fin_core::model::MAX_ORDER {
            return Err(CliError::Config(format!(
                "higher_order must be in 1..={}, got {}",
                fin_core::model::MAX_ORDER,
                self.higher_order
            )));
        }
        Ok(())
    }

    pub fn interaction_level(&self) -> f64 {
        self.interaction_level.unwrap_or(self.level)
    }

    /// Sampler settings with `k` and the response form filled in.
    pub fn resolved_sampler(&self, k: usize) -> Hyperparams {
        let mut h = self.sampler.clone();
        h.k = k;
        if self.higher_order != 2 {
            h.response = ResponseModel::Polynomial { order: self.higher_order };
        }
        h
    }
}

/// Settings of the simulation harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: ScenarioSpec,
    pub replicates: usize,
    /// Factors in the fitted model; `auto` uses `k = p`.
    pub k: KChoice,
    pub level: f64,
    pub output: PathBuf,
    pub sampler: Hyperparams,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            replicates: 10,
            k: KChoice::Auto,
            level: 0.95,
            output: PathBuf::from("fin-simulation"),
            sampler: Hyperparams { n_iter: 2000, n_burn: 1000, ..Hyperparams::default() },
        }
    }
}

impl SimulateConfig {
    pub fn from_toml_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.replicates == 0 {
            return Err(CliError::Config("replicates must be at least 1".into()));
        }
        check_level("level", self.level)?;
        self.scenario.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolved_k(&self) -> usize {
        match self.k {
            KChoice::Auto => self.scenario.p,
            KChoice::Fixed(k) => k,
        }
    }
}
