//! Application configuration: one JSON document with a section per module.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dp::{GridSpec, SdpOptions};
use crate::empc::EmpcConfig;
use crate::error::{Error, Result};
use crate::hydrology::InflowModel;
use crate::innerloop::InnerLoopConfig;
use crate::objectives::ObjectivesConfig;
use crate::reservoir::ReservoirSpec;
use crate::routing::RoutingModel;

/// The configuration shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// Storage nodes, evenly spaced on `[s_min, s_max]`.
    pub storage_nodes: usize,
    /// Control nodes, m3/s.
    pub controls: Vec<f64>,
    /// Scenarios per day in the stochastic expectation.
    pub scenarios_per_day: usize,
    pub tol_relative: f64,
    #[serde(default)]
    pub tol: Option<f64>,
    pub max_sweeps: usize,
}

impl DpConfig {
    pub fn grid(&self, spec: &ReservoirSpec) -> Result<GridSpec> {
        GridSpec::uniform(spec.s_min, spec.s_max, self.storage_nodes, self.controls.clone())
    }

    pub fn sdp_options(&self) -> SdpOptions {
        SdpOptions {
            tol_relative: self.tol_relative,
            tol: self.tol,
            max_sweeps: self.max_sweeps,
        }
    }

    pub fn validate(&self, spec: &ReservoirSpec) -> Result<()> {
        if self.scenarios_per_day == 0 {
            return Err(Error::config("dp.scenarios_per_day", "must be >= 1"));
        }
        if self.max_sweeps == 0 {
            return Err(Error::config("dp.max_sweeps", "must be >= 1"));
        }
        if !(self.tol_relative > 0.0) {
            return Err(Error::config("dp.tol_relative", "must be > 0"));
        }
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(Error::config("dp.tol", "must be > 0"));
            }
        }
        self.grid(spec).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ddp,
    Sdp,
    Empc,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Ddp => "ddp",
            Strategy::Sdp => "sdp",
            Strategy::Empc => "empc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    Train,
    Validation,
}

impl Period {
    pub fn name(&self) -> &'static str {
        match self {
            Period::Train => "train",
            Period::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub strategies: Vec<Strategy>,
    /// Weights for the DP strategies.
    pub alphas: Vec<f64>,
    /// Weights for eMPC; each is paired with every horizon.
    pub empc_alphas: Vec<f64>,
    /// eMPC prediction horizons.
    pub horizons: Vec<usize>,
    /// Trace the sweep is scored on.
    pub period: Period,
    pub train_days: usize,
    pub validation_days: usize,
    /// Log-mean increase of the validation climate at the wettest days.
    pub validation_wet_shift: f64,
    /// Added to the hydrology seed for the validation trace.
    pub validation_seed_offset: u64,
    /// Weight of the DDP run whose mean annual cycle trains the inner loop.
    pub vrft_alpha: f64,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("sweep.strategies", "must not be empty"));
        }
        if self.alphas.is_empty() {
            return Err(Error::config("sweep.alphas", "must not be empty"));
        }
        if let Some(i) = self.alphas.iter().position(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config(format!("sweep.alphas[{i}]"), "must lie in [0, 1]"));
        }
        if let Some(i) = self.empc_alphas.iter().position(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config(format!("sweep.empc_alphas[{i}]"), "must lie in [0, 1]"));
        }
        if self.strategies.contains(&Strategy::Empc) && (self.horizons.is_empty() || self.empc_alphas.is_empty()) {
            return Err(Error::config("sweep.horizons", "eMPC sweeps need at least one horizon and weight"));
        }
        if let Some(i) = self.horizons.iter().position(|h| *h == 0) {
            return Err(Error::config(format!("sweep.horizons[{i}]"), "must be >= 1"));
        }
        if self.train_days < crate::hydrology::DAYS_PER_YEAR {
            return Err(Error::config("sweep.train_days", "must cover at least one year"));
        }
        if self.validation_days == 0 {
            return Err(Error::config("sweep.validation_days", "must be >= 1"));
        }
        if !self.validation_wet_shift.is_finite() {
            return Err(Error::config("sweep.validation_wet_shift", "must be finite"));
        }
        if !(0.0..=1.0).contains(&self.vrft_alpha) {
            return Err(Error::config("sweep.vrft_alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub hydrology: InflowModel,
    pub reservoir: ReservoirSpec,
    pub routing: RoutingModel,
    pub objectives: ObjectivesConfig,
    pub dp: DpConfig,
    pub inner_loop: InnerLoopConfig,
    pub empc: EmpcConfig,
    pub sweep: SweepConfig,
}

impl AppConfig {
    pub fn default_config() -> Self {
        Self::from_json_str(DEFAULT_CONFIG).expect("shipped default config is valid")
    }

    /// Parses and validates; schema errors name the failing JSON path.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_reader(reader);
        let cfg: AppConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn validate(&self) -> Result<()> {
        self.hydrology.validate()?;
        self.reservoir.validate()?;
        self.routing.validate()?;
        self.objectives.validate()?;
        self.dp.validate(&self.reservoir)?;
        self.inner_loop.validate()?;
        self.empc.validate()?;
        self.sweep.validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.hydrology.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = AppConfig::default_config();
        assert_eq!(cfg.hydrology.mu[0].len(), crate::hydrology::DAYS_PER_YEAR);
        assert_eq!(cfg.objectives.h_bar, 950.0);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_CONFIG).unwrap();
        v["empc"]["solver"]["bogus"] = serde_json::json!(1);
        match AppConfig::from_json_str(&v.to_string()) {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("empc.solver"), "{path}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_types_name_their_path() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_CONFIG).unwrap();
        v["routing"]["lag"] = serde_json::json!("one");
        match AppConfig::from_json_str(&v.to_string()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "routing.lag"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_their_path() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_CONFIG).unwrap();
        v["sweep"]["alphas"] = serde_json::json!([0.1, 1.5]);
        match AppConfig::from_json_str(&v.to_string()) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "sweep.alphas[1]"),
            other => panic!("{other:?}"),
        }
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_CONFIG).unwrap();
        v["hydrology"]["R"][0][1] = serde_json::json!(0.99);
        v["hydrology"]["R"][1][0] = serde_json::json!(0.99);
        v["hydrology"]["R"][0][2] = serde_json::json!(-0.99);
        v["hydrology"]["R"][2][0] = serde_json::json!(-0.99);
        assert!(matches!(AppConfig::from_json_str(&v.to_string()), Err(Error::Config { .. })));
    }
}
