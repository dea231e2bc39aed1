//! The run configuration: one JSON file, overridable from the command line.

use std::path::{Path, PathBuf};

use buildout_core::estimation::ConstraintScenario;
use buildout_core::forecast::ForecastSettings;
use buildout_core::ingestion::CategorizeRules;
use buildout_core::model::{RawMatrix, N_STATES};
use buildout_core::regime::RegimeSettings;
use buildout_core::synth::{RegimeChange, SynthSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Failure, Kind};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Platted lots; defaults to the number of lots in the transactions.
    pub platted: Option<i64>,
    pub first_year: Option<i32>,
    pub last_year: Option<i32>,
    pub categorize: CategorizeRules,
    /// Constraint scenario JSON file.
    pub scenario: Option<PathBuf>,
    /// Derive scenario bounds from one-hop frequencies in the transactions.
    pub one_hop: Option<OneHop>,
    /// Widen every scenario bound by this factor.
    pub relax: Option<f64>,
    pub forecast: ForecastSettings,
    pub regimes: RegimeSettings,
    pub bayes: BayesOptions,
    pub synth: Option<SynthOptions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneHop {
    /// Inclusive step-year ranges pooled separately; empty pools every step.
    pub ranges: Vec<(i32, i32)>,
    pub z: f64,
    pub min_halfwidth: f64,
}

impl Default for OneHop {
    fn default() -> Self {
        Self { ranges: Vec::new(), z: 2.0, min_halfwidth: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesOptions {
    /// Holding times are measured at the end of this year; defaults to the
    /// last year in the data.
    pub as_of_year: Option<i32>,
    pub horizon: u32,
}

impl Default for BayesOptions {
    fn default() -> Self {
        Self { as_of_year: None, horizon: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub years: usize,
    pub platted: u64,
    pub initial: [u64; N_STATES],
    pub first_year: i32,
    pub matrix: RawMatrix,
    #[serde(default)]
    pub regime_changes: Vec<RegimeChange>,
}

impl SynthOptions {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            platted: self.platted,
            initial: self.initial,
            first_year: self.first_year,
            matrix: self.matrix,
            regime_changes: self.regime_changes.clone(),
            seed,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Failure::new(Kind::Config, e.to_string()).at(path))
    }

    /// Seeds every stage from the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.forecast.seed = seed;
        self.regimes.seed = seed;
        self
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn scenario(&self) -> Result<ConstraintScenario, Failure> {
        let scenario = match &self.scenario {
            None => ConstraintScenario::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Failure::new(Kind::Config, e.to_string()).at(path))?
            }
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_effective_config() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), RunConfig::default().hash());
        let b = a.clone().with_seed(5);
        assert_ne!(a.hash(), b.hash());
        assert_eq!((b.forecast.seed, b.regimes.seed), (5, 5));
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"forecast": {"mc_runs": 0}, "bayes": {"horizon": 3}}"#).unwrap();
        assert_eq!(c.forecast.mc_runs, 0);
        assert_eq!(c.forecast.horizon, ForecastSettings::default().horizon);
        assert_eq!(c.bayes, BayesOptions { as_of_year: None, horizon: 3 });
        assert!(serde_json::from_str::<RunConfig>(r#"{"seeds": 1}"#).is_err());
    }
}
