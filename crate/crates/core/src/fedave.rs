//! Federated averaging baseline: sampled clients run single-sample SGD on
//! their own data, the server averages the returned parameters.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::{EpochLedger, EpochRecord};
use crate::error::{FedError, Result};
use crate::numerics::{norm2, pairwise_sum};
use crate::problem::{empirical_risk, full_gradient, Dataset, LossModel};
use crate::rng::{stream_rng, streams, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { step: f64 },
    /// `c/(γ + 1)` where `γ` counts local steps since the start of the run.
    Decaying { c: f64 },
}

impl StepSchedule {
    pub fn at(&self, gamma: usize) -> f64 {
        match *self {
            StepSchedule::Constant { step } => step,
            StepSchedule::Decaying { c } => c / (gamma as f64 + 1.0),
        }
    }

    /// `c = 1/μ`.
    pub fn default_for(mu: f64) -> Self {
        StepSchedule::Decaying { c: 1.0 / mu }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            StepSchedule::Constant { step } => step,
            StepSchedule::Decaying { c } => c,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(FedError::InvalidArgument(format!("step parameter {v} must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAveConfig {
    pub b: usize,
    #[serde(rename = "T")]
    pub t_epochs: usize,
    pub tau: f64,
    pub step: StepSchedule,
    pub seed: u64,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

impl FedAveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.t_epochs == 0 {
            return Err(FedError::InvalidArgument("need b >= 1 and T >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(FedError::InvalidArgument(format!("tau={} outside (0,1]", self.tau)));
        }
        self.step.validate()
    }

    /// `⌈τm⌉` clients per epoch.
    pub fn active_clients(&self, m: usize) -> usize {
        ((self.tau * m as f64 - 1e-9).ceil() as usize).clamp(1, m.max(1))
    }
}

/// `b` steps of `θ ← θ − η_γ ∇f(x; θ)` with `x` drawn uniformly from `block`.
/// `first_step` is the global index of the first step, for the schedule.
pub fn local_sgd_epoch(
    model: &dyn LossModel,
    block: &[Vec<f64>],
    theta_in: &[f64],
    b: usize,
    schedule: &StepSchedule,
    first_step: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if b == 0 {
        return Err(FedError::InvalidArgument("b must be at least 1".into()));
    }
    if block.is_empty() {
        return Err(FedError::InvalidArgument("client block is empty".into()));
    }
    let mut theta = theta_in.to_vec();
    for j in 0..b {
        let x = &block[rng.random_range(0..block.len())];
        let eta = schedule.at(first_step + j);
        let g = model.grad(x, &theta);
        for (t, g) in theta.iter_mut().zip(g) {
            *t -= eta * g;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(FedError::DivergenceDetected { step: first_step + j + 1 });
        }
    }
    Ok(theta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FedAveRun {
    pub theta_final: Vec<f64>,
    /// Server parameters after each epoch, starting with `θ⁽⁰⁾`.
    pub trajectory: Vec<Vec<f64>>,
    pub f_trace: Vec<f64>,
    pub final_grad_norm: f64,
    pub ledger: EpochLedger,
    /// Active client indices per epoch.
    pub participants: Vec<Vec<usize>>,
}

pub fn run_fedave(model: &dyn LossModel, data: &Dataset, config: &FedAveConfig) -> Result<FedAveRun> {
    config.validate()?;
    let m = data.m();
    if m == 0 || data.s() == 0 {
        return Err(FedError::InvalidArgument("the baseline needs at least one non-empty client".into()));
    }
    let p = model.param_dim();
    let theta0 = config.theta0.clone().unwrap_or_else(|| vec![0.0; p]);
    if theta0.len() != p {
        return Err(FedError::DimensionMismatch(format!("theta0 has length {}, expected {p}", theta0.len())));
    }
    let k = config.active_clients(m);
    let mut sampler = stream_rng(config.seed, streams::CLIENT_SAMPLING);
    let mut client_rngs: Vec<Option<LabRng>> = (0..m)
        .map(|c| Some(stream_rng(config.seed, streams::CLIENT_SGD_BASE + c as u64)))
        .collect();
    let mut ledger = EpochLedger::new(m, config.tau)?;
    let mut trajectory = vec![theta0];
    let mut participants = Vec::with_capacity(config.t_epochs);

    for epoch in 0..config.t_epochs {
        let mut active = sample(&mut sampler, m, k).into_vec();
        active.sort_unstable();
        let theta = trajectory.last().expect("non-empty").clone();
        let mut jobs: Vec<(usize, LabRng)> = active
            .iter()
            .map(|&c| (c, client_rngs[c].take().expect("client rng present")))
            .collect();
        let outputs = jobs
            .par_iter_mut()
            .map(|(c, rng)| local_sgd_epoch(model, data.client(*c), &theta, config.b, &config.step, epoch * config.b, rng))
            .collect::<Vec<_>>();
        for (c, rng) in jobs {
            client_rngs[c] = Some(rng);
        }
        let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
        let next: Vec<f64> = pairwise_sum(&outputs, p).into_iter().map(|v| v / k as f64).collect();
        ledger.push(EpochRecord::type_a(config.b as u64));
        trajectory.push(next);
        participants.push(active);
    }

    let f_trace = trajectory
        .iter()
        .map(|t| empirical_risk(model, data, t))
        .collect::<Result<Vec<_>>>()?;
    let theta_final = trajectory.last().expect("non-empty").clone();
    let final_grad_norm = norm2(&full_gradient(model, data, &theta_final)?);
    Ok(FedAveRun {
        theta_final,
        trajectory,
        f_trace,
        final_grad_norm,
        ledger,
        participants,
    })
}

/// Largest per-client variance of the single-sample gradient around the
/// client mean, over the supplied parameters.
pub fn estimate_sigma2(model: &dyn LossModel, data: &Dataset, thetas: &[Vec<f64>]) -> f64 {
    let p = model.param_dim();
    let mut worst: f64 = 0.0;
    for theta in thetas {
        for block in data.clients().iter().filter(|b| !b.is_empty()) {
            let grads: Vec<Vec<f64>> = block.iter().map(|x| model.grad(x, theta)).collect();
            let mean: Vec<f64> = pairwise_sum(&grads, p).into_iter().map(|v| v / grads.len() as f64).collect();
            let var = grads
                .iter()
                .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
                / grads.len() as f64;
            worst = worst.max(var);
        }
    }
    worst
}

/// `count` parameters `θ ~ N(0, I)` from the variance-estimate stream.
pub fn sigma_sample_thetas(p: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, streams::SIGMA_ESTIMATE);
    (0..count)
        .map(|_| (0..p).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
        .collect()
}
