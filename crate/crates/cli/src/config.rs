//! Flat key-value run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every key any subcommand understands. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<f64>>,

    // dataset
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    /// Directory holding `dataset.json` and `dataset.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,

    // model
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_rank: Option<usize>,

    // fedlrgd
    #[serde(rename = "S", skip_serializing_if = "Option::is_none")]
    pub s_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub singular_tol: Option<f64>,

    // fedave
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<usize>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// `decaying` or `constant`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_c: Option<f64>,

    // sweep
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m0: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,

    // verify
    /// Multiplies every bound a suite compares against; 1 unless testing the
    /// harness itself.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn echo(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot echo config: {e}")))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn require<T: Copy>(value: Option<T>, key: &str) -> Result<T, CliError> {
        value.ok_or_else(|| CliError::Config(format!("missing key `{key}`")))
    }

    pub fn phis(&self) -> Vec<f64> {
        self.phi.clone().unwrap_or_else(|| vec![1.0, 10.0, 50.0])
    }
}

/// Parses `--phi 1,10,50`.
pub fn parse_phi_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| {
            let v: f64 = t.trim().parse().map_err(|_| format!("`{t}` is not a number"))?;
            if v >= 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(format!("phi={v} must be non-negative"))
            }
        })
        .collect()
}
