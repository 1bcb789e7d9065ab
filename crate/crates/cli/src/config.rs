//! TOML configuration. Every table and key is optional; command-line flags
//! override file values.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use ivpretest::analysis::AnalysisConfig;
use ivpretest::sim::{Branch, ExperimentGrid, ExperimentOptions};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub analysis: AnalysisConfig,
    pub simulation: SimulationConfig,
    pub oracle: OracleConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub branch: Branch,
    pub reps: usize,
    pub c0: f64,
    pub alpha: f64,
    pub grid: ExperimentGrid,
    pub options: ExperimentOptions,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            branch: Branch::TslsPass,
            reps: 500,
            c0: 10.0,
            alpha: 0.05,
            grid: ExperimentGrid::default(),
            options: ExperimentOptions::default(),
        }
    }
}

/// Sampler-versus-oracle comparison at one design point. The reference
/// dataset is the first replication of the design that passes the pre-test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n: usize,
    pub p: usize,
    pub beta0: f64,
    pub r: f64,
    pub sigma12: f64,
    pub c0: f64,
    pub reps: usize,
    pub min_retained: usize,
    pub seed: u64,
    pub samples: usize,
    pub min_cosine: f64,
    pub o_radius: f64,
    pub margin_tol: f64,
    pub slope_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n: 200,
            p: 3,
            beta0: 1.0,
            r: 0.7,
            sigma12: 0.8,
            c0: 100.0,
            reps: 600_000,
            min_retained: 500,
            seed: 0,
            samples: 20_000,
            min_cosine: 0.95,
            o_radius: f64::INFINITY,
            margin_tol: 0.05,
            slope_tol: 0.03,
        }
    }
}
