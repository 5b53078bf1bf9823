//! Federated low-rank gradient descent.
//!
//! The server evaluates partials on its own `r` samples at `r` sampled
//! parameters and inverts the resulting `G⁽ⁱ⁾`. Each client then expresses
//! its summed partials as a combination of the server's, sends the `rp`
//! weights over `r` epochs, and the server runs inexact GD on the
//! reweighted server gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::{EpochLedger, EpochRecord};
use crate::error::{FedError, Result};
use crate::numerics::{dist2, invert, norm2, pairwise_sum, singular_values, Matrix, DEFAULT_SINGULAR_TOL};
use crate::problem::{empirical_risk, full_gradient, Dataset, LossModel};
use crate::rng::{stream_rng, streams};

/// Extra ϑ draws allowed after a singular `G⁽ⁱ⁾`.
pub const MAX_REDRAWS: usize = 5;
/// Bound on `‖G·G⁻¹ − I‖_max` for an accepted inverse.
pub const INVERSE_CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedLRGDConfig {
    pub r: usize,
    #[serde(rename = "S")]
    pub s_iters: usize,
    pub l1: f64,
    pub seed: u64,
    #[serde(default = "default_singular_tol")]
    pub singular_tol: f64,
    /// Starting point; zeros when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

fn default_singular_tol() -> f64 {
    DEFAULT_SINGULAR_TOL
}

impl FedLRGDConfig {
    pub fn new(r: usize, s_iters: usize, l1: f64, seed: u64) -> Self {
        Self {
            r,
            s_iters,
            l1,
            seed,
            singular_tol: DEFAULT_SINGULAR_TOL,
            theta0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.s_iters == 0 {
            return Err(FedError::InvalidArgument("need r >= 1 and S >= 1".into()));
        }
        if !(self.l1 > 0.0 && self.l1.is_finite()) {
            return Err(FedError::InvalidArgument(format!("L1={} must be positive", self.l1)));
        }
        if !(self.singular_tol >= 0.0) {
            return Err(FedError::InvalidArgument("singular_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerPrecomp {
    pub thetas: Vec<Vec<f64>>,
    /// `g[i]_{j,k} = g_i(x⁽⁰ʲ⁾; ϑ⁽ᵏ⁾)`.
    pub g: Vec<Matrix>,
    pub g_inv: Vec<Matrix>,
    pub conditions: Vec<f64>,
    /// `‖(G⁽ⁱ⁾)⁻¹‖_op = 1/σ_min`, logged against `r^α`.
    pub inverse_norms: Vec<f64>,
    /// Number of ϑ draws used, including the accepted one.
    pub draws: usize,
}

fn draw_thetas(rng: &mut impl Rng, r: usize, p: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (p as f64).sqrt();
    (0..r)
        .map(|_| (0..p).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn try_precompute(model: &dyn LossModel, server: &[Vec<f64>], thetas: Vec<Vec<f64>>, tol: f64) -> Result<ServerPrecomp> {
    let r = server.len();
    let p = model.param_dim();
    let mut g = Vec::with_capacity(p);
    let mut g_inv = Vec::with_capacity(p);
    let mut conditions = Vec::with_capacity(p);
    let mut inverse_norms = Vec::with_capacity(p);
    for i in 0..p {
        let gi = Matrix::from_fn(r, r, |j, k| model.partial(i, &server[j], &thetas[k]));
        let (inv, cond) = invert(&gi, tol)?;
        let residual = gi.matmul(&inv)?.sub(&Matrix::identity(r))?.max_abs();
        if !(residual <= INVERSE_CHECK_TOL) {
            return Err(FedError::SingularMatrix { condition: cond });
        }
        let smin = *singular_values(&gi).last().expect("r >= 1");
        inverse_norms.push(1.0 / smin);
        conditions.push(cond);
        g.push(gi);
        g_inv.push(inv);
    }
    Ok(ServerPrecomp {
        thetas,
        g,
        g_inv,
        conditions,
        inverse_norms,
        draws: 1,
    })
}

/// Epoch 1: `r²` partial-derivative evaluations per coordinate at the server.
pub fn server_precompute(model: &dyn LossModel, data: &Dataset, config: &FedLRGDConfig) -> Result<ServerPrecomp> {
    config.validate()?;
    if data.r() != config.r {
        return Err(FedError::DimensionMismatch(format!(
            "server holds {} samples but r={}",
            data.r(),
            config.r
        )));
    }
    if data.d() != model.data_dim() {
        return Err(FedError::DimensionMismatch("dataset and model dimensions differ".into()));
    }
    let mut rng = stream_rng(config.seed, streams::THETA_DRAWS);
    let mut last = None;
    for draw in 1..=MAX_REDRAWS + 1 {
        let thetas = draw_thetas(&mut rng, config.r, model.param_dim());
        match try_precompute(model, data.server(), thetas, config.singular_tol) {
            Ok(mut pre) => {
                pre.draws = draw;
                return Ok(pre);
            }
            Err(e @ FedError::SingularMatrix { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw"))
}

/// `v⁽ⁱ'ᶜ⁾` for one client, one length-`r` vector per coordinate `i`.
pub fn client_weights(model: &dyn LossModel, block: &[Vec<f64>], pre: &ServerPrecomp) -> Result<Vec<Vec<f64>>> {
    let r = pre.thetas.len();
    (0..model.param_dim())
        .map(|i| {
            let mut u = vec![0.0; r];
            for x in block {
                for (k, theta) in pre.thetas.iter().enumerate() {
                    u[k] += model.partial(i, x, theta);
                }
            }
            pre.g_inv[i].left_mul_vec(&u)
        })
        .collect()
}

/// `v[i][c]` for every coordinate and client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub p: usize,
    pub m: usize,
    pub r: usize,
    pub v: Vec<Vec<Vec<f64>>>,
}

impl WeightTensor {
    /// Rearranges per-client results `[c][i]` into `[i][c]`.
    pub fn from_clients(per_client: Vec<Vec<Vec<f64>>>, p: usize, r: usize) -> Result<Self> {
        let m = per_client.len();
        if per_client.iter().any(|c| c.len() != p || c.iter().any(|v| v.len() != r)) {
            return Err(FedError::DimensionMismatch("client weights have inconsistent shape".into()));
        }
        if per_client.iter().flatten().flatten().any(|w| !w.is_finite()) {
            return Err(FedError::DivergenceDetected { step: 0 });
        }
        let mut v = vec![Vec::with_capacity(m); p];
        for client in per_client {
            for (i, vi) in client.into_iter().enumerate() {
                v[i].push(vi);
            }
        }
        Ok(Self { p, m, r, v })
    }

    /// `Σ_c v⁽ⁱ'ᶜ⁾` per coordinate, summed pairwise in client order.
    pub fn aggregate(&self) -> Vec<Vec<f64>> {
        self.v.iter().map(|vi| pairwise_sum(vi, self.r)).collect()
    }
}

/// One client-to-server upload: `{v_k⁽ⁱ'ᶜ⁾ : i ∈ [p]}` for a single `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    pub epoch: usize,
    pub client: usize,
    pub k: usize,
    pub payload: Vec<f64>,
}

/// Messages for epochs `2..=r+1`: in epoch `t` each client sends index `k = t − 2`.
pub fn client_messages(weights: &WeightTensor) -> Vec<ClientMessage> {
    let mut out = Vec::with_capacity(weights.m * weights.r);
    for k in 0..weights.r {
        for c in 0..weights.m {
            out.push(ClientMessage {
                epoch: k + 2,
                client: c,
                k,
                payload: (0..weights.p).map(|i| weights.v[i][c][k]).collect(),
            });
        }
    }
    out
}

/// Server-side reassembly of `Σ_c v⁽ⁱ'ᶜ⁾` from uploads.
pub fn aggregate_messages(messages: &[ClientMessage], p: usize, m: usize, r: usize) -> Result<Vec<Vec<f64>>> {
    let mut per_client = vec![vec![vec![f64::NAN; r]; p]; m];
    for msg in messages {
        if msg.payload.len() != p || msg.client >= m || msg.k >= r {
            return Err(FedError::DimensionMismatch(format!("malformed message {msg:?}")));
        }
        for (i, &w) in msg.payload.iter().enumerate() {
            per_client[msg.client][i][msg.k] = w;
        }
    }
    Ok(WeightTensor::from_clients(per_client, p, r)
        .map_err(|_| FedError::Internal("missing or non-finite uploads".into()))?
        .aggregate())
}

/// `∇̂F_i(θ) = (1/n) Σ_k g_i(x⁽⁰ᵏ⁾; θ)(1 + Σ_c v_k⁽ⁱ'ᶜ⁾)`.
pub fn approx_gradient(model: &dyn LossModel, server: &[Vec<f64>], n: usize, theta: &[f64], aggregated: &[Vec<f64>]) -> Vec<f64> {
    let grads: Vec<Vec<f64>> = server.iter().map(|x| model.grad(x, theta)).collect();
    (0..model.param_dim())
        .map(|i| {
            grads
                .iter()
                .zip(&aggregated[i])
                .map(|(g, v)| g[i] * (1.0 + v))
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// `θ⁽ᵞ⁾ = θ⁽ᵞ⁻¹⁾ − ∇̂F(θ⁽ᵞ⁻¹⁾)/L1` for `S` steps; returns all `S+1` iterates.
pub fn inexact_gd(theta0: &[f64], mut oracle: impl FnMut(&[f64]) -> Vec<f64>, l1: f64, s_iters: usize) -> Result<Vec<Vec<f64>>> {
    if s_iters == 0 || !(l1 > 0.0) {
        return Err(FedError::InvalidArgument("need S >= 1 and L1 > 0".into()));
    }
    let mut traj = Vec::with_capacity(s_iters + 1);
    traj.push(theta0.to_vec());
    for step in 1..=s_iters {
        let prev = traj.last().expect("non-empty");
        let g = oracle(prev);
        let next: Vec<f64> = prev.iter().zip(&g).map(|(t, gi)| t - gi / l1).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(FedError::DivergenceDetected { step });
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Smallest `S ≥ 1` with `(1 − 1/κ)^S · numerator ≤ ε`.
pub fn choose_iterations(kappa: f64, numerator: f64, epsilon: f64) -> Result<usize> {
    if !(kappa > 1.0) {
        return Err(FedError::InvalidCondition(format!("kappa={kappa} must exceed 1")));
    }
    if !(epsilon > 0.0) || !(numerator >= epsilon) {
        return Err(FedError::InvalidArgument("need epsilon > 0 and numerator >= epsilon".into()));
    }
    let raw = (numerator / epsilon).ln() / (kappa / (kappa - 1.0)).ln();
    // ratios that are exact powers of κ/(κ−1) should not round up an extra step
    let nearest = raw.round();
    let s = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) { nearest } else { raw.ceil() };
    Ok((s as usize).max(1))
}

/// `9(B+3)⁴p/(2μ)`, the additive term in the iteration numerator.
pub fn bias_term(b: f64, p: usize, mu: f64) -> f64 {
    9.0 * (b + 3.0).powi(4) * p as f64 / (2.0 * mu)
}

/// Inputs of the theoretical rank formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankInputs {
    pub d: usize,
    pub eta: f64,
    pub alpha: f64,
    pub l2: f64,
    pub kappa: f64,
    pub mu: f64,
    pub b: f64,
    pub p: usize,
    pub epsilon: f64,
    /// `F(θ⁽⁰⁾) − F_*`.
    pub f0_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankChoice {
    pub ln_first: f64,
    pub ln_second: f64,
    /// `⌈exp(max(ln_first, ln_second))⌉`; infinite if it overflows `f64`.
    pub r: f64,
}

/// Theoretical rank, evaluated in log space.
pub fn choose_rank_theoretical(x: &RankInputs) -> Result<RankChoice> {
    let d = x.d as f64;
    let exponent = x.eta - (2.0 * x.alpha + 2.0) * d;
    if x.d == 0 || !(exponent > 0.0) {
        return Err(FedError::InvalidCondition(format!(
            "need eta > (2 alpha + 2) d, got eta={}, alpha={}, d={}",
            x.eta, x.alpha, x.d
        )));
    }
    if !(x.kappa > 1.0) {
        return Err(FedError::InvalidCondition(format!("kappa={} must exceed 1", x.kappa)));
    }
    if !(x.l2 > 0.0 && x.mu > 0.0 && x.b >= 0.0 && x.epsilon > 0.0 && x.f0_gap >= 0.0 && x.p > 0) {
        return Err(FedError::InvalidArgument("rank inputs out of range".into()));
    }
    let cap = 9.0 * (x.b + 3.0).powi(4) * x.p as f64 / (8.0 * x.mu);
    if x.epsilon > cap {
        return Err(FedError::InvalidCondition(format!("epsilon={} exceeds {cap}", x.epsilon)));
    }
    let ln_first = 1.0 + 0.5 * d.ln() + d * 2f64.ln() + d * (x.eta + d).ln();
    let numerator = x.f0_gap + bias_term(x.b, x.p, x.mu);
    let ln_second = ln_second_branch(x, numerator);
    let top = ln_first.max(ln_second);
    let value = top.exp();
    let nearest = value.round();
    let r = if (value - nearest).abs() <= 1e-9 * nearest { nearest } else { value.ceil() };
    Ok(RankChoice { ln_first, ln_second, r })
}

fn ln_second_branch(x: &RankInputs, numerator: f64) -> f64 {
    let (d, eta) = (x.d as f64, x.eta);
    let ln_a = d * x.l2.ln() + d * eta.ln() + eta * (d + 1.0) + 0.5 * eta * d.ln() + eta * d * (2.0 * eta + 2.0 * d).ln()
        - eta * d * (eta - 1.0).ln();
    let ln_b = x.kappa.ln() + numerator.ln() - (x.kappa - 1.0).ln() - x.epsilon.ln();
    (ln_a + 0.5 * d * ln_b) / (eta - (2.0 * x.alpha + 2.0) * d)
}

/// Right-hand side of the inexact-GD error bound:
/// `(1−1/κ)^S·gap₀ + (1/(2L1))·Σ_γ (1−1/κ)^{S−γ} e_γ`.
pub fn lemma2_bound(gap0: f64, errors: &[f64], kappa: f64, l1: f64) -> f64 {
    let rho = 1.0 - 1.0 / kappa;
    let s = errors.len();
    let tail: f64 = errors
        .iter()
        .enumerate()
        .map(|(g, e)| rho.powi((s - g - 1) as i32) * e)
        .sum();
    rho.powi(s as i32) * gap0 + tail / (2.0 * l1)
}

/// `max |g_i(x; θ)|` over a seeded sample of points `x` uniform in the cube
/// and `θ ~ N(0, I)`. An estimate, not a certificate.
pub fn estimate_gradient_bound(model: &dyn LossModel, samples: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, streams::BOUND_ESTIMATE);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x: Vec<f64> = (0..model.data_dim()).map(|_| rng.random()).collect();
        let theta: Vec<f64> = (0..model.param_dim()).map(|_| rng.sample(StandardNormal)).collect();
        worst = model.grad(&x, &theta).iter().fold(worst, |a, g| a.max(g.abs()));
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FedLRGDRun {
    pub theta_star: Vec<f64>,
    pub trajectory: Vec<Vec<f64>>,
    /// `F(θ⁽ᵞ⁾)` for every iterate.
    pub f_trace: Vec<f64>,
    /// `‖∇̂F(θ⁽ᵞ⁻¹⁾) − ∇F(θ⁽ᵞ⁻¹⁾)‖₂²` for `γ = 1..S`.
    pub grad_errors: Vec<f64>,
    pub final_grad_norm: f64,
    pub ledger: EpochLedger,
    pub messages: Vec<ClientMessage>,
    pub conditions: Vec<f64>,
    pub inverse_norms: Vec<f64>,
    pub theta_draws: usize,
}

/// The full protocol: precompute, client weights, `r` upload epochs, inexact GD.
pub fn run_fedlrgd(model: &dyn LossModel, data: &Dataset, config: &FedLRGDConfig) -> Result<FedLRGDRun> {
    let p = model.param_dim();
    let (r, m, s) = (config.r, data.m(), data.s());
    let theta0 = config.theta0.clone().unwrap_or_else(|| vec![0.0; p]);
    if theta0.len() != p {
        return Err(FedError::DimensionMismatch(format!("theta0 has length {}, expected {p}", theta0.len())));
    }
    let mut ledger = EpochLedger::new(m, 1.0)?;

    let pre = server_precompute(model, data, config)?;
    ledger.push(EpochRecord::type_b((r * r) as u64)?);

    let per_client = data
        .clients()
        .par_iter()
        .map(|block| client_weights(model, block, &pre))
        .collect::<Result<Vec<_>>>()?;
    let weights = WeightTensor::from_clients(per_client, p, r)?;
    let messages = client_messages(&weights);
    ledger.push(EpochRecord::type_a((r * s) as u64));
    for _ in 1..r {
        ledger.push(EpochRecord::type_c());
    }
    let aggregated = aggregate_messages(&messages, p, m, r)?;

    let n = data.n();
    let mut grad_errors = Vec::with_capacity(config.s_iters);
    let mut failure = None;
    let trajectory = inexact_gd(
        &theta0,
        |theta| {
            let approx = approx_gradient(model, data.server(), n, theta, &aggregated);
            match full_gradient(model, data, theta) {
                Ok(exact) => grad_errors.push(dist2(&approx, &exact).powi(2)),
                Err(e) => failure = Some(e),
            }
            approx
        },
        config.l1,
        config.s_iters,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    ledger.push(EpochRecord::type_b((r * config.s_iters) as u64)?);

    let f_trace = trajectory
        .iter()
        .map(|t| empirical_risk(model, data, t))
        .collect::<Result<Vec<_>>>()?;
    let theta_star = trajectory.last().expect("non-empty").clone();
    let final_grad_norm = norm2(&full_gradient(model, data, &theta_star)?);
    Ok(FedLRGDRun {
        theta_star,
        trajectory,
        f_trace,
        grad_errors,
        final_grad_norm,
        ledger,
        messages,
        conditions: pre.conditions,
        inverse_norms: pre.inverse_norms,
        theta_draws: pre.draws,
    })
}
