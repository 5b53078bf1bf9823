//! Federated oracle complexity and the timing model behind it.
//!
//! An epoch is one of three kinds:
//!
//! * **A**: active clients compute `b` gradients each, then communicate.
//! * **B**: only the server computes `b` gradients.
//! * **C**: clients communicate without computing.
//!
//! `Γ` charges `b` per epoch plus `φτm` whenever clients communicate.
//! [`expected_epoch_time`] keeps the straggler and constant terms that `Γ`
//! drops.

use std::f64::consts::{FRAC_PI_3, PI};

use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpochType {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch_type: EpochType,
    /// Gradients per active client (A), at the server (B), or zero (C).
    pub b: u64,
    pub communicated: bool,
}

impl EpochRecord {
    pub fn type_a(b: u64) -> Self {
        Self {
            epoch_type: EpochType::A,
            b,
            communicated: true,
        }
    }

    pub fn type_b(b: u64) -> Result<Self> {
        if b == 0 {
            return Err(FedError::InvalidArgument("a server epoch computes at least one gradient".into()));
        }
        Ok(Self {
            epoch_type: EpochType::B,
            b,
            communicated: false,
        })
    }

    pub fn type_c() -> Self {
        Self {
            epoch_type: EpochType::C,
            b: 0,
            communicated: true,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self.epoch_type {
            EpochType::A => self.communicated,
            EpochType::B => !self.communicated && self.b >= 1,
            EpochType::C => self.communicated && self.b == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLedger {
    pub records: Vec<EpochRecord>,
    pub m: usize,
    pub tau: f64,
}

impl EpochLedger {
    pub fn new(m: usize, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(FedError::InvalidArgument(format!("tau={tau} outside (0,1]")));
        }
        Ok(Self {
            records: Vec::new(),
            m,
            tau,
        })
    }

    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends `other`'s epochs; metadata of `self` is kept.
    pub fn extend(&mut self, other: &EpochLedger) {
        self.records.extend_from_slice(&other.records);
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(FedError::InvalidArgument("empty ledger".into()));
        }
        if let Some(k) = self.records.iter().position(|r| !r.is_valid()) {
            return Err(FedError::InvalidArgument(format!("epoch {k} is malformed")));
        }
        Ok(())
    }

    /// `Γ` with this ledger's own `τ` and `m`.
    pub fn gamma_at(&self, phi: f64) -> Result<f64> {
        gamma(
            self,
            &CostModel {
                phi,
                tau: self.tau,
                m: self.m,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Time to communicate one parameter vector over time per gradient.
    pub phi: f64,
    pub tau: f64,
    pub m: usize,
}

impl CostModel {
    pub fn communication(&self) -> f64 {
        self.phi * self.tau * self.m as f64
    }
}

/// `Γ = Σ_t b_t + 1{communicated} φτm`.
pub fn gamma(ledger: &EpochLedger, cost: &CostModel) -> Result<f64> {
    if !(cost.phi > 0.0) {
        return Err(FedError::InvalidArgument("phi must be positive".into()));
    }
    ledger.validate()?;
    let comm = cost.communication();
    Ok(ledger
        .records
        .iter()
        .map(|r| r.b as f64 + if r.communicated { comm } else { 0.0 })
        .sum())
}

/// Expected wall-clock time of one epoch in gradient-time units:
/// `2b + ln(τm) + φτm` (A), `2b` (B), `φτm` (C).
pub fn expected_epoch_time(epoch_type: EpochType, b: u64, cost: &CostModel) -> Result<f64> {
    let tm = cost.tau * cost.m as f64;
    if epoch_type != EpochType::B && tm < 1.0 {
        return Err(FedError::InvalidArgument(format!("tau*m = {tm} < 1")));
    }
    Ok(match epoch_type {
        EpochType::A => 2.0 * b as f64 + tm.ln() + cost.communication(),
        EpochType::B => 2.0 * b as f64,
        EpochType::C => cost.communication(),
    })
}

fn ln_factorial(k: u64) -> f64 {
    (1..=k).map(|j| (j as f64).ln()).sum()
}

/// Upper tail `P(Y > y)` of Erlang(`b`, 1).
pub fn erlang_sf(y: f64, b: u64) -> f64 {
    if y <= 0.0 {
        return 1.0;
    }
    if y < b as f64 {
        return 1.0 - erlang_lower_series(y, b);
    }
    // e^{-y} Σ_{k<b} y^k/k! summed in log space, largest term last
    let ln_y = y.ln();
    let logs: Vec<f64> = (0..b).map(|k| -y + k as f64 * ln_y - ln_factorial(k)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logs.iter().map(|l| (l - top).exp()).sum();
    (top + s.ln()).exp().min(1.0)
}

/// `Σ_{k≥b} e^{-y} y^k/k!`, accurate when `y < b`.
fn erlang_lower_series(y: f64, b: u64) -> f64 {
    let mut term = (-y + b as f64 * y.ln() - ln_factorial(b)).exp();
    let mut sum = 0.0f64;
    let mut k = b;
    while term > 1e-18 * sum.max(f64::MIN_POSITIVE) || k == b {
        sum += term;
        k += 1;
        term *= y / k as f64;
        if term == 0.0 {
            break;
        }
    }
    sum
}

/// `F_Y(y) = 1 − e^{−y} Σ_{k<b} y^k/k!`.
pub fn erlang_cdf(y: f64, b: u64) -> f64 {
    assert!(b >= 1, "Erlang shape must be at least 1");
    if y <= 0.0 {
        return 0.0;
    }
    if y < b as f64 {
        erlang_lower_series(y, b).min(1.0)
    } else {
        1.0 - erlang_sf(y, b)
    }
}

pub const QUANTILE_ITERATIONS: usize = 200;

/// Bisection inverse of [`erlang_cdf`] on `[0, b + 40(ln q + 1)]` with `q = 1/(1-p)`.
pub fn erlang_quantile(p: f64, b: u64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(FedError::DomainError(format!("probability {p} outside [0,1)")));
    }
    if b == 0 {
        return Err(FedError::InvalidArgument("Erlang shape must be at least 1".into()));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let tail = 1.0 - p;
    let q = 1.0 / tail;
    let (mut lo, mut hi) = (0.0, b as f64 + 40.0 * (q.ln() + 1.0));
    // Compare tails near one to avoid cancellation in 1 - F.
    let below = |y: f64| {
        if p > 0.5 {
            erlang_sf(y, b) > tail
        } else {
            erlang_cdf(y, b) < p
        }
    };
    if below(hi) {
        return Err(FedError::Internal(format!("quantile bracket too small for p={p}, b={b}")));
    }
    for _ in 0..QUANTILE_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop2Bounds {
    pub lower: f64,
    pub upper: f64,
    pub applicable: bool,
}

/// Bracket `½ln(q−1) + ½ln b ≤ F_Y⁻¹(1 − 1/q) ≤ 2ln(q−1) + 2b ln(2b)`,
/// valid once `(q−1)b ≥ 55`.
pub fn prop2_bounds(q: u64, b: u64) -> Result<Prop2Bounds> {
    if q < 2 || b < 1 {
        return Err(FedError::InvalidArgument("need q >= 2 and b >= 1".into()));
    }
    let (qm, bf) = ((q - 1) as f64, b as f64);
    Ok(Prop2Bounds {
        lower: 0.5 * qm.ln() + 0.5 * bf.ln(),
        upper: 2.0 * qm.ln() + 2.0 * bf * (2.0 * bf).ln(),
        applicable: (q - 1) * b >= 55,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Monte Carlo estimate of `b + E[max(Y_1, …, Y_k)]` with `Y_j` i.i.d.
/// Erlang(`b`, 1). Trial `t` draws from its own stream, so the result does
/// not depend on the thread count.
pub fn mc_max_erlang_mean(k: usize, b: u64, trials: usize, seed: u64) -> Result<McEstimate> {
    if k == 0 || trials == 0 || b == 0 {
        return Err(FedError::InvalidArgument("k, b and trials must be positive".into()));
    }
    let dist = Gamma::new(b as f64, 1.0).map_err(|e| FedError::Internal(e.to_string()))?;
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, streams::MONTE_CARLO_BASE + t as u64);
            let max = (0..k).map(|_| dist.sample(&mut rng)).fold(0.0, f64::max);
            b as f64 + max
        })
        .collect();
    let n = trials as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if trials > 1 {
        samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        trials,
    })
}

/// Extreme-value approximation `ln k + 2b` of the mean epoch time.
pub fn gumbel_epoch_approx(k: usize, b: u64) -> f64 {
    (k as f64).ln() + 2.0 * b as f64
}

/// Real roots of `a³ + p·a + q` in ascending order, when there are three
/// distinct ones (`−4p³ − 27q² > 0`).
pub fn viete_depressed_cubic(p: f64, q: f64) -> Result<[f64; 3]> {
    let discriminant = -4.0 * p * p * p - 27.0 * q * q;
    if !(discriminant > 0.0) {
        return Err(FedError::ComplexRoots { discriminant });
    }
    let amp = 2.0 * (-p / 3.0).sqrt();
    let arg = ((3.0 * q / (2.0 * p)) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
    let phase = arg.acos() / 3.0;
    let mut roots = [0.0; 3];
    for (k, root) in roots.iter_mut().enumerate() {
        *root = amp * (phase - 2.0 * PI * k as f64 / 3.0).cos();
    }
    roots.sort_by(f64::total_cmp);
    for a in roots {
        let scale = (a * a * a).abs().max((p * a).abs()).max(q.abs()).max((-p).powf(1.5));
        let residual = a * a * a + p * a + q;
        if residual.abs() > 1e-9 * scale {
            return Err(FedError::Internal(format!("Viète root {a} has residual {residual}")));
        }
    }
    Ok(roots)
}

fn check_unit_interval(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FedError::DomainError(format!("t={t} outside [0,1]")));
    }
    Ok(())
}

/// `h(t) = sin(⅓ arcsin(1 − t²) + 2π/3)`.
pub fn lemma3_h(t: f64) -> Result<f64> {
    check_unit_interval(t)?;
    Ok(((1.0 - t * t).asin() / 3.0 + 2.0 * FRAC_PI_3).sin())
}

/// `|h(t) − ½ − t/√6| ≤ 5t²/9`.
pub fn lemma3_check(t: f64) -> Result<bool> {
    let h = lemma3_h(t)?;
    // a few ulps absorb the rounding of h at the tight point t = 0
    Ok((h - 0.5 - t / 6f64.sqrt()).abs() <= 5.0 * t * t / 9.0 + 4.0 * f64::EPSILON)
}

/// `h(t) − ½` without cancellation for small `t`, via
/// `arccos(1 − t²) = 2 arcsin(t/√2)`.
fn h_minus_half(t: f64) -> f64 {
    let u = (1.0 - t * t).asin() / 3.0 + 2.0 * FRAC_PI_3;
    2.0 * ((u + 5.0 * PI / 6.0) / 2.0).cos() * (-(t / 2f64.sqrt()).asin() / 3.0).sin()
}

/// Inputs of the FedAve epoch-size optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedAveProblem {
    pub m: usize,
    /// `ε / (C p)`.
    pub rho: f64,
    pub phi: f64,
    pub tau: f64,
    /// Problem-dependent scaling constant.
    pub c: f64,
}

impl FedAveProblem {
    pub fn new(m: usize, rho: f64, phi: f64, tau: f64) -> Self {
        Self { m, rho, phi, tau, c: 1.0 }
    }

    pub fn constants(&self) -> (f64, f64, f64) {
        let m = self.m as f64;
        (1.0 / (2.0 * m * self.rho), m / self.rho.sqrt(), self.phi * self.tau * m)
    }

    /// `g(b) = C₁b² + C₁C₃b + C₂C₃/b + C₂`.
    pub fn objective(&self, b: f64) -> f64 {
        let (c1, c2, c3) = self.constants();
        c1 * b * b + c1 * c3 * b + c2 * c3 / b + c2
    }

    /// `2C₁b³ + C₁C₃b² − C₂C₃`.
    pub fn stationarity(&self, b: f64) -> f64 {
        let (c1, c2, c3) = self.constants();
        2.0 * c1 * b * b * b + c1 * c3 * b * b - c2 * c3
    }

    /// Epochs needed at epoch size `b`.
    pub fn epochs(&self, b: f64) -> f64 {
        let m = self.m as f64;
        let lead = b / (2.0 * m * self.rho);
        lead + (lead * lead + m * m / (self.rho * b * b)).sqrt()
    }

    pub fn phi_gate(&self) -> f64 {
        40.0 / (self.c.powf(0.25) * self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedAveOptimum {
    pub b_star: f64,
    pub t_star: f64,
    /// `g(b*)`, which brackets `Γ(FedAve)` within a factor of two.
    pub gamma_estimate: f64,
    pub b_bounds: (f64, f64),
    pub gamma_bounds: (f64, f64),
    /// Sign changes of the stationarity polynomial's coefficients.
    pub positive_roots: usize,
}

/// Optimal FedAve epoch size from the trigonometric root of the
/// stationarity cubic.
pub fn fedave_optimal_b(problem: &FedAveProblem) -> Result<FedAveOptimum> {
    let FedAveProblem { m, rho, phi, tau, c } = *problem;
    if m == 0 || !(rho > 0.0 && rho <= 1.0) || !(tau > 0.0 && tau <= 1.0) || !(c > 0.0) {
        return Err(FedError::InvalidArgument(
            "need m >= 1, rho in (0,1], tau in (0,1], C > 0".into(),
        ));
    }
    let gate = problem.phi_gate();
    if !(phi >= gate) {
        return Err(FedError::PhiTooSmall { phi, gate });
    }
    let (c1, c2, c3) = problem.constants();
    let t = (54.0 * c2 / (c1 * c3 * c3)).sqrt();
    if t > 1.0 {
        return Err(FedError::DomainError(format!("root parameter t={t} exceeds 1")));
    }
    let b_star = c3 / 3.0 * h_minus_half(t);
    let coeffs = [2.0 * c1, c1 * c3, 0.0, -c2 * c3];
    let signs: Vec<f64> = coeffs.iter().copied().filter(|v| *v != 0.0).collect();
    let positive_roots = signs.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
    let mf = m as f64;
    Ok(FedAveOptimum {
        b_star,
        t_star: problem.epochs(b_star),
        gamma_estimate: problem.objective(b_star),
        b_bounds: (0.5 * mf * rho.powf(0.25), 2.0 * mf * rho.powf(0.25)),
        gamma_bounds: (
            0.75 * phi * tau * mf * rho.powf(-0.75),
            8.0 * phi * tau * mf * rho.powf(-0.75),
        ),
        positive_roots,
    })
}

/// One grid point of the FedLRGD vs FedAve comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimePoint {
    pub m: usize,
    pub s: usize,
    pub p: usize,
    pub epsilon: f64,
    pub phi: f64,
    pub r: usize,
    #[serde(rename = "S")]
    pub s_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub point: RegimePoint,
    pub gamma_fedlrgd: f64,
    pub gamma_fedave_plus: f64,
    pub ratio: f64,
}

pub const SWEEP_CSV_HEADER: &str = "m,s,p,epsilon,phi,r,S,gamma_fedlrgd,gamma_fedave_plus,ratio";

impl SweepRow {
    pub fn to_csv_line(&self) -> String {
        let p = &self.point;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            p.m, p.s, p.p, p.epsilon, p.phi, p.r, p.s_iters, self.gamma_fedlrgd, self.gamma_fedave_plus, self.ratio
        )
    }
}

/// `Γ(FedLRGD) = r² + rs + rS + φmr`.
pub fn gamma_fedlrgd(r: usize, s: usize, s_iters: usize, m: usize, phi: f64) -> f64 {
    let (r, s, si, m) = (r as f64, s as f64, s_iters as f64, m as f64);
    r * r + r * s + r * si + phi * m * r
}

/// Unit-constant FedAve scaling `φm(p/ε)^{3/4}`.
pub fn gamma_fedave_plus(m: usize, p: usize, epsilon: f64, phi: f64) -> f64 {
    phi * m as f64 * (p as f64 / epsilon).powf(0.75)
}

pub fn proposition1_sweep(points: &[RegimePoint]) -> Result<Vec<SweepRow>> {
    points
        .iter()
        .map(|pt| {
            if pt.m == 0 || pt.p == 0 || pt.r == 0 || pt.s_iters == 0 || !(pt.epsilon > 0.0) || !(pt.phi > 0.0) {
                return Err(FedError::InvalidArgument(format!("invalid grid point {pt:?}")));
            }
            let gl = gamma_fedlrgd(pt.r, pt.s, pt.s_iters, pt.m, pt.phi);
            let ga = gamma_fedave_plus(pt.m, pt.p, pt.epsilon, pt.phi);
            Ok(SweepRow {
                point: *pt,
                gamma_fedlrgd: gl,
                gamma_fedave_plus: ga,
                ratio: gl / ga,
            })
        })
        .collect()
}

/// Parameters coupling `(m, s, p, ε, r, S)` along the comparison regime:
/// `m = m0·2^k`, `ε = (ms)^{−β}`, `r = ⌈r0 (p/ε)^{1/(2c1)}⌉` and
/// `S = ⌈ln(1/ε) / ln(κ/(κ−1))⌉`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub m0: usize,
    pub points: usize,
    pub s: usize,
    pub p: usize,
    pub phi: f64,
    pub beta: f64,
    pub r0: f64,
    pub c1: f64,
    pub kappa: f64,
    pub tau: f64,
    pub c: f64,
}

impl Default for Regime {
    fn default() -> Self {
        Self {
            m0: 100,
            points: 6,
            s: 10,
            p: 10,
            phi: 50.0,
            beta: 0.5,
            r0: 4.0,
            c1: 8.0,
            kappa: 2.0,
            tau: 1.0,
            c: 1.0,
        }
    }
}

impl Regime {
    pub fn grid(&self) -> Result<Vec<RegimePoint>> {
        if self.points == 0 || self.m0 == 0 || self.s == 0 || self.p == 0 {
            return Err(FedError::InvalidArgument("regime sizes must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) || !(self.kappa > 1.0) || !(self.c1 > 0.0) || !(self.r0 > 0.0) {
            return Err(FedError::InvalidArgument("need beta in (0,1], kappa > 1, c1 > 0, r0 > 0".into()));
        }
        let gate = 40.0 / (self.c.powf(0.25) * self.tau);
        if !(self.phi >= gate) {
            return Err(FedError::PhiTooSmall { phi: self.phi, gate });
        }
        (0..self.points)
            .map(|k| {
                let m = self
                    .m0
                    .checked_mul(1usize << k)
                    .ok_or_else(|| FedError::InvalidArgument("m overflows".into()))?;
                if self.s as f64 > self.phi * m as f64 {
                    return Err(FedError::InvalidArgument(format!("s={} exceeds phi*m at m={m}", self.s)));
                }
                let epsilon = ((m * self.s) as f64).powf(-self.beta);
                let r = (self.r0 * (self.p as f64 / epsilon).powf(1.0 / (2.0 * self.c1))).ceil() as usize;
                let s_iters = ((1.0 / epsilon).ln() / (self.kappa / (self.kappa - 1.0)).ln()).ceil().max(1.0) as usize;
                Ok(RegimePoint {
                    m,
                    s: self.s,
                    p: self.p,
                    epsilon,
                    phi: self.phi,
                    r,
                    s_iters,
                })
            })
            .collect()
    }
}
