//! Bound-verification suites behind `fedlrgd verify`.

use std::f64::consts::E;

use fedlrgd_core::complexity::{
    erlang_quantile, erlang_sf, fedave_optimal_b, lemma3_h, mc_max_erlang_mean, prop2_bounds, FedAveProblem,
};
use fedlrgd_core::covering::{build_latent_matrix, holder_suite, lemma1_rows, theorem1_check};
use fedlrgd_core::fedlrgd::{lemma2_bound, run_fedlrgd, FedLRGDConfig};
use fedlrgd_core::problem::{reference_minimum, Dataset, LossModel, SeparableModel, SoftLabelLogistic};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::CliError;

pub const SUITES: [&str; 7] = ["lemma1", "theorem1", "lemma2", "prop2", "lemma3", "appendixD", "eq13mc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub label: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub suite: String,
    pub bound_factor: f64,
    pub pass: bool,
    pub instances: Vec<Instance>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(|i| !i.pass)
    }
}

/// `measured ≤ bound`.
fn upper(label: String, measured: f64, bound: f64) -> Instance {
    Instance {
        label,
        measured,
        bound,
        pass: measured <= bound,
    }
}

/// `measured ≥ bound`.
fn lower(label: String, measured: f64, bound: f64) -> Instance {
    Instance {
        label,
        measured,
        bound,
        pass: measured >= bound,
    }
}

fn taylor(k: f64) -> Result<Vec<Instance>, CliError> {
    let mut out = Vec::new();
    for f in holder_suite() {
        let thetas: Vec<Vec<f64>> = [0.3, 1.1, 2.0].iter().map(|&t| vec![t; f.param_dim()]).collect();
        for row in lemma1_rows(&f, &thetas, &[2, 4, 8])? {
            out.push(upper(format!("{} q={}", f.name, row.q), row.sup_error, 1.05 * row.bound * k));
        }
    }
    Ok(out)
}

/// Grid of `n` latent points and parameters used by the low-rank check.
pub fn latent_grid(n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let ys = (0..n).map(|i| vec![(i as f64 + 0.5) / n as f64]).collect();
    let ts = (0..n).map(|j| vec![2.0 * (j as f64 + 0.5) / n as f64]).collect();
    (ys, ts)
}

fn latent_rank(k: f64) -> Result<Vec<Instance>, CliError> {
    let r = (2.0 * E).ceil() as usize;
    let (ys, ts) = latent_grid(64);
    let mut out = Vec::new();
    for f in holder_suite().into_iter().filter(|f| f.d == 1 && f.eta == 1.0) {
        let lm = build_latent_matrix(&f, &ys, &ts)?;
        let rep = theorem1_check(&lm, r, f.eta, f.l2, f.d)?;
        out.push(upper(format!("{} r={r}", f.name), rep.lhs, rep.rhs * k));
    }
    Ok(out)
}

fn inexact_gd_case(label: &str, model: &dyn LossModel, data: &Dataset, r: usize, seed: u64, k: f64) -> Result<Instance, CliError> {
    let c = model.constants();
    let (l1, mu) = (c.l1.expect("declared"), c.mu.expect("declared"));
    let reference = reference_minimum(model, data, l1)?;
    let run = run_fedlrgd(model, data, &FedLRGDConfig::new(r, 30, l1, seed))?;
    let gap0 = run.f_trace[0] - reference.f_star;
    let gap = run.f_trace.last().expect("non-empty") - reference.f_star;
    let bound = lemma2_bound(gap0, &run.grad_errors, l1 / mu, l1);
    Ok(upper(label.into(), gap, bound * k + 1e-6))
}

/// Run matrix for the inexact-GD bound: exact and under-ranked separable
/// models plus the logistic loss.
/// Label, model, dataset and rank of one run.
pub type InexactGdCase = (String, Box<dyn LossModel>, Dataset, usize);

pub fn inexact_gd_matrix() -> Result<Vec<InexactGdCase>, CliError> {
    let mut out: Vec<InexactGdCase> = Vec::new();
    for (r0, r) in [(3, 3), (3, 2), (2, 1)] {
        out.push((
            format!("separable r0={r0} r={r}"),
            Box::new(SeparableModel::random(2, 3, r0, 0.5, 1)?),
            Dataset::uniform(2, 5, 8, r, 2)?,
            r,
        ));
    }
    for r in [3, 6] {
        out.push((
            format!("logistic r={r}"),
            Box::new(SoftLabelLogistic::new(3, 0.5)?),
            Dataset::uniform(3, 5, 20, r, 3)?,
            r,
        ));
    }
    Ok(out)
}

fn inexact_gd(k: f64, seed: u64) -> Result<Vec<Instance>, CliError> {
    inexact_gd_matrix()?
        .iter()
        .map(|(label, model, data, r)| inexact_gd_case(label, model.as_ref(), data, *r, seed, k))
        .collect()
}

pub const PROP2_Q: [u64; 10] = [2, 3, 5, 8, 12, 20, 56, 100, 1000, 10_000];
pub const PROP2_B: [u64; 8] = [1, 2, 3, 5, 8, 10, 20, 50];

fn quantile_bracket(k: f64) -> Result<Vec<Instance>, CliError> {
    let mut out = Vec::new();
    for q in PROP2_Q {
        for b in PROP2_B.into_iter().filter(|&b| (q - 1) * b >= 55) {
            let y = erlang_quantile(1.0 - 1.0 / q as f64, b)?;
            let bounds = prop2_bounds(q, b)?;
            out.push(lower(format!("q={q} b={b} lower"), y, bounds.lower));
            out.push(upper(format!("q={q} b={b} upper"), y, bounds.upper * k));
            let residual = (erlang_sf(y, b) - 1.0 / q as f64).abs();
            out.push(upper(format!("q={q} b={b} residual"), residual, 1e-10));
        }
    }
    Ok(out)
}

fn cubic_expansion(k: f64) -> Result<Vec<Instance>, CliError> {
    let mut out = Vec::with_capacity(1001);
    for i in 0..1000 {
        let t = i as f64 / 999.0;
        let dev = (lemma3_h(t)? - 0.5 - t / 6f64.sqrt()).abs();
        out.push(upper(format!("t={t:.6}"), dev, 5.0 * t * t / 9.0 * k + 4.0 * f64::EPSILON));
    }
    out.push(upper("h(0) = 1/2".into(), (lemma3_h(0.0)? - 0.5).abs(), 1e-12 * k));
    Ok(out)
}

/// Parameter sets `(m, ρ, φ, τ)` with `φ` at or above the gate.
pub const EPOCH_SIZE_CASES: [(usize, f64, f64, f64); 10] = [
    (100, 1e-4, 50.0, 1.0),
    (100, 1e-6, 100.0, 1.0),
    (1000, 1e-5, 40.0, 1.0),
    (1000, 1e-8, 500.0, 0.5),
    (50, 1e-3, 80.0, 0.5),
    (10_000, 1e-6, 60.0, 1.0),
    (500, 1e-7, 200.0, 0.25),
    (200, 1e-4, 1000.0, 1.0),
    (20, 1e-2, 400.0, 0.1),
    (5000, 1e-9, 45.0, 1.0),
];

/// Bisection for the positive root of the stationarity cubic.
pub fn bisect_b(problem: &FedAveProblem) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while problem.stationarity(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if problem.stationarity(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn epoch_size(k: f64) -> Result<Vec<Instance>, CliError> {
    let mut out = Vec::new();
    for (m, rho, phi, tau) in EPOCH_SIZE_CASES {
        let problem = FedAveProblem::new(m, rho, phi, tau);
        let opt = fedave_optimal_b(&problem)?;
        let (c1, c2, c3) = problem.constants();
        let b = opt.b_star;
        let scale = (2.0 * c1 * b * b * b).abs() + (c1 * c3 * b * b).abs() + (c2 * c3).abs();
        let tag = format!("m={m} rho={rho:e} phi={phi} tau={tau}");
        out.push(upper(format!("{tag} residual"), problem.stationarity(b).abs() / scale, 1e-9 * k));
        out.push(lower(format!("{tag} b* lower"), b, opt.b_bounds.0));
        out.push(upper(format!("{tag} b* upper"), b, opt.b_bounds.1 * k));
        let oracle = bisect_b(&problem);
        out.push(upper(format!("{tag} bisection"), ((b - oracle) / oracle).abs(), 1e-8 * k));
        out.push(lower(format!("{tag} gamma lower"), opt.gamma_estimate, opt.gamma_bounds.0));
        out.push(upper(format!("{tag} gamma upper"), opt.gamma_estimate, opt.gamma_bounds.1 * k));
    }
    Ok(out)
}

fn harmonic(k: usize) -> f64 {
    (1..=k).map(|i| 1.0 / i as f64).sum()
}

fn max_erlang_mc(k: f64, trials: usize, seed: u64) -> Result<Vec<Instance>, CliError> {
    let mut out = Vec::new();
    for kk in [1000usize, 10_000] {
        for b in [1u64, 5, 10] {
            let est = mc_max_erlang_mean(kk, b, trials, seed)?;
            let approx = (kk as f64).ln() + 2.0 * b as f64;
            out.push(upper(
                format!("k={kk} b={b} relative deviation from ln k + 2b"),
                (est.mean - approx).abs() / approx,
                0.15 * k,
            ));
            if b == 1 {
                out.push(upper(
                    format!("k={kk} b=1 deviation from 1 + H_k in standard errors"),
                    (est.mean - 1.0 - harmonic(kk)).abs() / est.std_error,
                    2.0 * k,
                ));
            }
        }
    }
    Ok(out)
}

pub fn run_suite(suite: &str, cfg: &Config) -> Result<VerifyReport, CliError> {
    let k = cfg.bound_factor.unwrap_or(1.0);
    if k.is_nan() || k <= 0.0 {
        return Err(CliError::Config("bound_factor must be positive".into()));
    }
    let instances = match suite {
        "lemma1" => taylor(k)?,
        "theorem1" => latent_rank(k)?,
        "lemma2" => inexact_gd(k, cfg.seed())?,
        "prop2" => quantile_bracket(k)?,
        "lemma3" => cubic_expansion(k)?,
        "appendixD" => epoch_size(k)?,
        "eq13mc" => max_erlang_mc(k, cfg.trials.unwrap_or(10_000), cfg.seed())?,
        other => {
            return Err(CliError::Config(format!(
                "unknown suite `{other}`; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(VerifyReport {
        schema_version: 1,
        suite: suite.into(),
        bound_factor: k,
        pass: instances.iter().all(|i| i.pass),
        instances,
    })
}
