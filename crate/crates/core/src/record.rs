//! Versioned JSON run records shared by both algorithms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::complexity::{EpochLedger, EpochType};
use crate::error::Result;
use crate::fedave::FedAveRun;
use crate::fedlrgd::FedLRGDRun;
use crate::problem::DatasetHeader;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub epoch: usize,
    pub epoch_type: EpochType,
    pub b: u64,
    pub communicated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEntry {
    pub phi: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub algorithm: String,
    pub model: String,
    pub dataset: DatasetHeader,
    pub config: serde_json::Value,
    pub ledger: Vec<LedgerRow>,
    pub f_trace: Vec<f64>,
    pub theta_final: Vec<f64>,
    pub final_grad_norm: f64,
    pub gamma: Vec<GammaEntry>,
    /// Diagnostics and estimates; never certificates.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn ledger_rows(ledger: &EpochLedger) -> Vec<LedgerRow> {
    ledger
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| LedgerRow {
            epoch: k + 1,
            epoch_type: r.epoch_type,
            b: r.b,
            communicated: r.communicated,
        })
        .collect()
}

fn gammas(ledger: &EpochLedger, phis: &[f64]) -> Result<Vec<GammaEntry>> {
    phis.iter()
        .map(|&phi| Ok(GammaEntry { phi, gamma: ledger.gamma_at(phi)? }))
        .collect()
}

impl RunRecord {
    #[allow(clippy::too_many_arguments)]
    fn build(
        algorithm: &str,
        model: String,
        dataset: DatasetHeader,
        config: serde_json::Value,
        ledger: &EpochLedger,
        f_trace: Vec<f64>,
        theta_final: Vec<f64>,
        final_grad_norm: f64,
        phis: &[f64],
    ) -> Result<Self> {
        ledger.validate()?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            algorithm: algorithm.into(),
            model,
            dataset,
            config,
            ledger: ledger_rows(ledger),
            f_trace,
            theta_final,
            final_grad_norm,
            gamma: gammas(ledger, phis)?,
            metadata: BTreeMap::new(),
        })
    }

    pub fn from_fedlrgd(run: &FedLRGDRun, model: String, dataset: DatasetHeader, config: serde_json::Value, phis: &[f64]) -> Result<Self> {
        let mut rec = Self::build(
            "fedlrgd",
            model,
            dataset,
            config,
            &run.ledger,
            run.f_trace.clone(),
            run.theta_star.clone(),
            run.final_grad_norm,
            phis,
        )?;
        rec.metadata.insert("g_conditions".into(), serde_json::to_value(&run.conditions)?);
        rec.metadata.insert("g_inverse_norms".into(), serde_json::to_value(&run.inverse_norms)?);
        rec.metadata.insert("theta_draws".into(), run.theta_draws.into());
        rec.metadata.insert("messages".into(), run.messages.len().into());
        rec.metadata.insert("grad_errors_sq".into(), serde_json::to_value(&run.grad_errors)?);
        Ok(rec)
    }

    pub fn from_fedave(run: &FedAveRun, model: String, dataset: DatasetHeader, config: serde_json::Value, phis: &[f64]) -> Result<Self> {
        let mut rec = Self::build(
            "fedave",
            model,
            dataset,
            config,
            &run.ledger,
            run.f_trace.clone(),
            run.theta_final.clone(),
            run.final_grad_norm,
            phis,
        )?;
        rec.metadata.insert("participants".into(), serde_json::to_value(&run.participants)?);
        Ok(rec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
