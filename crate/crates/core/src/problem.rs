//! Empirical risk minimization over a server/client partitioned dataset.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numerics::{dist2, dot, enumerate_multi_indices, norm2, MultiIndex};
use crate::rng::{stream_rng, streams};

/// Training data split into a server block of `r` points and `m` client
/// blocks of `s` points each, all in `[0,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    server: Vec<Vec<f64>>,
    clients: Vec<Vec<Vec<f64>>>,
    seed: Option<u64>,
}

/// Metadata written next to the CSV dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub d: usize,
    pub m: usize,
    pub s: usize,
    pub r: usize,
    pub n: usize,
    pub seed: Option<u64>,
}

impl Dataset {
    /// `m = 0` is accepted: the server-only problem is a useful degenerate case.
    pub fn new(d: usize, server: Vec<Vec<f64>>, clients: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if d == 0 {
            return Err(FedError::InvalidArgument("data dimension must be positive".into()));
        }
        if server.is_empty() {
            return Err(FedError::InvalidArgument("server needs at least one sample".into()));
        }
        if let Some(first) = clients.first() {
            if clients.iter().any(|c| c.len() != first.len()) {
                return Err(FedError::InvalidArgument("client blocks differ in size".into()));
            }
        }
        for x in server.iter().chain(clients.iter().flatten()) {
            if x.len() != d {
                return Err(FedError::DimensionMismatch(format!(
                    "point of dim {} in a dataset of dim {d}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(FedError::InvalidArgument("coordinates must lie in [0,1]".into()));
            }
        }
        Ok(Self {
            d,
            server,
            clients,
            seed: None,
        })
    }

    /// Points drawn uniformly from `[0,1]^d`, server block first.
    pub fn uniform(d: usize, m: usize, s: usize, r: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, streams::DATASET);
        let mut draw = || -> Vec<f64> { (0..d).map(|_| rng.random::<f64>()).collect() };
        let server = (0..r).map(|_| draw()).collect();
        let clients = (0..m).map(|_| (0..s).map(|_| draw()).collect()).collect();
        let mut ds = Self::new(d, server, clients)?;
        ds.seed = Some(seed);
        Ok(ds)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.clients.len()
    }

    pub fn s(&self) -> usize {
        self.clients.first().map_or(0, Vec::len)
    }

    pub fn r(&self) -> usize {
        self.server.len()
    }

    pub fn n(&self) -> usize {
        self.m() * self.s() + self.r()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn server(&self) -> &[Vec<f64>] {
        &self.server
    }

    pub fn clients(&self) -> &[Vec<Vec<f64>>] {
        &self.clients
    }

    pub fn client(&self, c: usize) -> &[Vec<f64>] {
        &self.clients[c]
    }

    /// All points, server block first then clients in index order.
    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.server
            .iter()
            .chain(self.clients.iter().flatten())
            .map(Vec::as_slice)
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            d: self.d,
            m: self.m(),
            s: self.s(),
            r: self.r(),
            n: self.n(),
            seed: self.seed,
        }
    }

    /// One row per point: block id (0 for the server, `c` for client `c`) then coordinates.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let blocks = std::iter::once((0usize, &self.server))
            .chain(self.clients.iter().enumerate().map(|(c, b)| (c + 1, b)));
        for (id, block) in blocks {
            for x in block {
                out.push_str(&id.to_string());
                for v in x {
                    out.push(',');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_csv(header: &DatasetHeader, csv: &str) -> Result<Self> {
        let mut server = Vec::new();
        let mut clients = vec![Vec::new(); header.m];
        for (lineno, line) in csv.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut fields = line.split(',');
            let id: usize = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| FedError::Parse(format!("line {}: bad block id", lineno + 1)))?;
            let x = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| FedError::Parse(format!("line {}: {e}", lineno + 1)))?;
            match id {
                0 => server.push(x),
                c if c <= header.m => clients[c - 1].push(x),
                c => return Err(FedError::Parse(format!("line {}: block {c} > m", lineno + 1))),
            }
        }
        let mut ds = Self::new(header.d, server, clients)?;
        if ds.header().n != header.n || ds.r() != header.r || (header.m > 0 && ds.s() != header.s) {
            return Err(FedError::Parse("CSV contents disagree with header".into()));
        }
        ds.seed = header.seed;
        Ok(ds)
    }
}

/// Smoothness and regularity constants a model declares about itself.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    /// Lipschitz constant of `∇_θ f(x; ·)`.
    pub l1: Option<f64>,
    /// Strong convexity modulus.
    pub mu: Option<f64>,
    /// Hölder smoothness of each `g_i(·; θ)`.
    pub eta: Option<f64>,
    /// Hölder constant.
    pub l2: Option<f64>,
    /// Uniform bound on `|g_i|`.
    pub b: Option<f64>,
}

impl ModelConstants {
    pub fn kappa(&self) -> Option<f64> {
        Some(self.l1? / self.mu?)
    }
}

/// Loss `f(x; θ)` with analytic gradient. `partial(i, ..)` is `g_i`.
pub trait LossModel: Send + Sync {
    fn name(&self) -> String;
    fn param_dim(&self) -> usize;
    fn data_dim(&self) -> usize;
    fn loss(&self, x: &[f64], theta: &[f64]) -> f64;
    fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64>;
    fn partial(&self, i: usize, x: &[f64], theta: &[f64]) -> f64 {
        self.grad(x, theta)[i]
    }
    fn constants(&self) -> ModelConstants;
}

/// `f ≡ 0`.
#[derive(Debug, Clone)]
pub struct ZeroLoss {
    pub p: usize,
    pub d: usize,
}

impl LossModel for ZeroLoss {
    fn name(&self) -> String {
        "zero".into()
    }
    fn param_dim(&self) -> usize {
        self.p
    }
    fn data_dim(&self) -> usize {
        self.d
    }
    fn loss(&self, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn grad(&self, _: &[f64], _: &[f64]) -> Vec<f64> {
        vec![0.0; self.p]
    }
    fn partial(&self, _: usize, _: &[f64], _: &[f64]) -> f64 {
        0.0
    }
    fn constants(&self) -> ModelConstants {
        ModelConstants::default()
    }
}

/// `f = ½‖θ‖²`, independent of the data.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub p: usize,
    pub d: usize,
}

impl LossModel for Quadratic {
    fn name(&self) -> String {
        "quadratic".into()
    }
    fn param_dim(&self) -> usize {
        self.p
    }
    fn data_dim(&self) -> usize {
        self.d
    }
    fn loss(&self, _: &[f64], theta: &[f64]) -> f64 {
        0.5 * dot(theta, theta)
    }
    fn grad(&self, _: &[f64], theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }
    fn partial(&self, i: usize, _: &[f64], theta: &[f64]) -> f64 {
        theta[i]
    }
    fn constants(&self) -> ModelConstants {
        ModelConstants {
            l1: Some(1.0),
            mu: Some(1.0),
            ..Default::default()
        }
    }
}

/// `f = aᵀθ`: every partial is a constant.
#[derive(Debug, Clone)]
pub struct LinearParam {
    pub a: Vec<f64>,
    pub d: usize,
}

impl LossModel for LinearParam {
    fn name(&self) -> String {
        "linear".into()
    }
    fn param_dim(&self) -> usize {
        self.a.len()
    }
    fn data_dim(&self) -> usize {
        self.d
    }
    fn loss(&self, _: &[f64], theta: &[f64]) -> f64 {
        dot(&self.a, theta)
    }
    fn grad(&self, _: &[f64], _: &[f64]) -> Vec<f64> {
        self.a.clone()
    }
    fn partial(&self, i: usize, _: &[f64], _: &[f64]) -> f64 {
        self.a[i]
    }
    fn constants(&self) -> ModelConstants {
        ModelConstants::default()
    }
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// ℓ2-regularized cross-entropy with soft labels. A data point is `(y, z)`
/// with features `y ∈ [0,1]^{d-1}` and label `z ∈ [0,1]`, so `p = d - 1`.
#[derive(Debug, Clone)]
pub struct SoftLabelLogistic {
    d: usize,
    mu: f64,
}

impl SoftLabelLogistic {
    /// `mu = 0` is allowed for evaluation but the model then declares no
    /// strong convexity.
    pub fn new(d: usize, mu: f64) -> Result<Self> {
        if d < 2 {
            return Err(FedError::InvalidArgument("logistic model needs d >= 2".into()));
        }
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(FedError::InvalidArgument("mu must be non-negative".into()));
        }
        Ok(Self { d, mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

impl LossModel for SoftLabelLogistic {
    fn name(&self) -> String {
        format!("logistic(d={}, mu={})", self.d, self.mu)
    }
    fn param_dim(&self) -> usize {
        self.d - 1
    }
    fn data_dim(&self) -> usize {
        self.d
    }
    fn loss(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (y, z) = (&x[..self.d - 1], x[self.d - 1]);
        let t = dot(theta, y);
        z * softplus(-t) + (1.0 - z) * softplus(t) + 0.5 * self.mu * dot(theta, theta)
    }
    fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let (y, z) = (&x[..self.d - 1], x[self.d - 1]);
        let c = sigmoid(dot(theta, y)) - z;
        y.iter().zip(theta).map(|(yi, ti)| c * yi + self.mu * ti).collect()
    }
    fn partial(&self, i: usize, x: &[f64], theta: &[f64]) -> f64 {
        let (y, z) = (&x[..self.d - 1], x[self.d - 1]);
        (sigmoid(dot(theta, y)) - z) * y[i] + self.mu * theta[i]
    }
    fn constants(&self) -> ModelConstants {
        let mut c = logistic_constants(self.d, self.mu.max(f64::MIN_POSITIVE))
            .expect("validated in constructor");
        if self.mu == 0.0 {
            c.mu = None;
            c.l1 = Some((self.d - 1) as f64 / 2.0);
        }
        c
    }
}

/// Certified constants of the soft-label logistic loss.
pub fn logistic_constants(d: usize, mu: f64) -> Result<ModelConstants> {
    if d < 2 || !(mu > 0.0) {
        return Err(FedError::InvalidArgument("need d >= 2 and mu > 0".into()));
    }
    Ok(ModelConstants {
        l1: Some((d - 1) as f64 / 2.0 + mu),
        mu: Some(mu),
        eta: Some(2.0),
        l2: Some(1.0),
        b: None,
    })
}

/// Loss whose partials have exact rank `r0` as bivariate functions of `(x, θ)`:
///
/// `f = (μ/2)‖θ‖² + Σ_w φ_w(x) Σ_i a_{w,i} ln cosh(θ_i + b_{w,i})`
///
/// with `φ_w` the first `r0` monomials in graded order (`φ_1 = 1`), so
/// `g_i = μθ_i + Σ_w φ_w(x) a_{w,i} tanh(θ_i + b_{w,i})`.
#[derive(Debug, Clone)]
pub struct SeparableModel {
    d: usize,
    p: usize,
    mu: f64,
    monomials: Vec<MultiIndex>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

impl SeparableModel {
    /// Coefficients `a ∈ [0.5, 1.5]`, shifts `b ∈ [-1, 1]`, drawn from `seed`.
    pub fn random(d: usize, p: usize, r0: usize, mu: f64, seed: u64) -> Result<Self> {
        if d == 0 || p == 0 || r0 == 0 {
            return Err(FedError::InvalidArgument("d, p and r0 must be positive".into()));
        }
        if !(mu > 0.0) {
            return Err(FedError::InvalidArgument("mu must be positive".into()));
        }
        let mut degree = 0;
        let monomials = loop {
            let all = enumerate_multi_indices(d, degree);
            if all.len() >= r0 {
                break all[..r0].to_vec();
            }
            degree += 1;
        };
        let mut rng = stream_rng(seed, streams::DATASET ^ 0xA5);
        let a = (0..r0)
            .map(|_| (0..p).map(|_| rng.random_range(0.5..1.5)).collect())
            .collect();
        let b = (0..r0)
            .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Ok(Self {
            d,
            p,
            mu,
            monomials,
            a,
            b,
        })
    }

    pub fn rank(&self) -> usize {
        self.monomials.len()
    }
}

fn ln_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl LossModel for SeparableModel {
    fn name(&self) -> String {
        format!("separable(d={}, p={}, r0={})", self.d, self.p, self.rank())
    }
    fn param_dim(&self) -> usize {
        self.p
    }
    fn data_dim(&self) -> usize {
        self.d
    }
    fn loss(&self, x: &[f64], theta: &[f64]) -> f64 {
        let mut total = 0.5 * self.mu * dot(theta, theta);
        for (w, s) in self.monomials.iter().enumerate() {
            let phi = s.monomial(x);
            let inner: f64 = (0..self.p)
                .map(|i| self.a[w][i] * ln_cosh(theta[i] + self.b[w][i]))
                .sum();
            total += phi * inner;
        }
        total
    }
    fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        (0..self.p).map(|i| self.partial(i, x, theta)).collect()
    }
    fn partial(&self, i: usize, x: &[f64], theta: &[f64]) -> f64 {
        let mut g = self.mu * theta[i];
        for (w, s) in self.monomials.iter().enumerate() {
            g += s.monomial(x) * self.a[w][i] * (theta[i] + self.b[w][i]).tanh();
        }
        g
    }
    fn constants(&self) -> ModelConstants {
        let l1 = self.mu
            + (0..self.p)
                .map(|i| self.a.iter().map(|row| row[i]).sum::<f64>())
                .fold(0.0, f64::max);
        ModelConstants {
            l1: Some(l1),
            mu: Some(self.mu),
            ..Default::default()
        }
    }
}

/// Wraps a model and replaces its declared constants.
pub struct Declared<M> {
    pub inner: M,
    pub constants: ModelConstants,
}

impl<M: LossModel> LossModel for Declared<M> {
    fn name(&self) -> String {
        self.inner.name()
    }
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }
    fn loss(&self, x: &[f64], theta: &[f64]) -> f64 {
        self.inner.loss(x, theta)
    }
    fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        self.inner.grad(x, theta)
    }
    fn partial(&self, i: usize, x: &[f64], theta: &[f64]) -> f64 {
        self.inner.partial(i, x, theta)
    }
    fn constants(&self) -> ModelConstants {
        self.constants
    }
}

fn check_shapes(model: &dyn LossModel, data: &Dataset, theta: &[f64]) -> Result<()> {
    if model.data_dim() != data.d() {
        return Err(FedError::DimensionMismatch(format!(
            "model expects d={}, dataset has d={}",
            model.data_dim(),
            data.d()
        )));
    }
    if model.param_dim() != theta.len() {
        return Err(FedError::DimensionMismatch(format!(
            "model expects p={}, got {}",
            model.param_dim(),
            theta.len()
        )));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(FedError::InvalidArgument("non-finite parameter".into()));
    }
    Ok(())
}

/// `F(θ)` accumulated per block: server sum plus each client's sum.
pub fn empirical_risk(model: &dyn LossModel, data: &Dataset, theta: &[f64]) -> Result<f64> {
    check_shapes(model, data, theta)?;
    let block = |pts: &[Vec<f64>]| pts.iter().map(|x| model.loss(x, theta)).sum::<f64>();
    let clients: f64 = data.clients().iter().map(|c| block(c)).sum();
    Ok((block(data.server()) + clients) / data.n() as f64)
}

/// `F(θ)` as one flat sum over all points.
pub fn empirical_risk_flat(model: &dyn LossModel, data: &Dataset, theta: &[f64]) -> Result<f64> {
    check_shapes(model, data, theta)?;
    Ok(data.points().map(|x| model.loss(x, theta)).sum::<f64>() / data.n() as f64)
}

/// Sum of per-sample gradients over a block of points.
pub fn block_gradient_sum(model: &dyn LossModel, points: &[Vec<f64>], theta: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; model.param_dim()];
    for x in points {
        for (a, g) in acc.iter_mut().zip(model.grad(x, theta)) {
            *a += g;
        }
    }
    acc
}

/// `∇F(θ)`: server block plus client blocks, averaged over `n`.
pub fn full_gradient(model: &dyn LossModel, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    check_shapes(model, data, theta)?;
    let mut acc = block_gradient_sum(model, data.server(), theta);
    for c in data.clients() {
        for (a, g) in acc.iter_mut().zip(block_gradient_sum(model, c, theta)) {
            *a += g;
        }
    }
    let n = data.n() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// `F(θ) - F_* ≤ ε`.
///
/// The comparison allows a few ulps so that a gap equal to `ε` up to the
/// rounding of the subtraction counts as inside.
pub fn is_epsilon_approximate(f_value: f64, f_star: f64, epsilon: f64) -> bool {
    let ulps = 4.0 * f64::EPSILON * f_value.abs().max(f_star.abs()).max(epsilon);
    f_value - f_star <= epsilon + ulps
}

fn sample_point(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>()).collect()
}

fn sample_theta(rng: &mut impl Rng, p: usize) -> Vec<f64> {
    (0..p)
        .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Largest observed `‖∇f(x;θ¹) − ∇f(x;θ²)‖ / ‖θ¹ − θ²‖` over random pairs.
pub fn check_smoothness_in_theta(model: &dyn LossModel, sample_count: usize, rng: &mut impl Rng) -> Result<f64> {
    let l1 = model
        .constants()
        .l1
        .ok_or_else(|| FedError::InvalidArgument("model declares no L1".into()))?;
    let mut worst: f64 = 0.0;
    for k in 0..sample_count {
        let x = sample_point(rng, model.data_dim());
        let (t1, t2) = (sample_theta(rng, model.param_dim()), sample_theta(rng, model.param_dim()));
        let gap = dist2(&t1, &t2);
        if gap == 0.0 {
            continue;
        }
        let ratio = dist2(&model.grad(&x, &t1), &model.grad(&x, &t2)) / gap;
        if ratio > l1 * (1.0 + 1e-6) {
            return Err(FedError::AssumptionViolation(format!(
                "gradient Lipschitz ratio {ratio} exceeds L1={l1} at pair {k}: x={x:?}, theta1={t1:?}, theta2={t2:?}"
            )));
        }
        worst = worst.max(ratio);
    }
    Ok(worst)
}

/// Smallest observed `(f(θ¹) − f(θ²) − ∇f(θ²)ᵀ(θ¹−θ²)) / ((μ/2)‖θ¹−θ²‖²)`.
pub fn check_strong_convexity(model: &dyn LossModel, sample_count: usize, rng: &mut impl Rng) -> Result<f64> {
    let mu = model
        .constants()
        .mu
        .ok_or_else(|| FedError::InvalidArgument("model declares no mu".into()))?;
    let mut worst = f64::INFINITY;
    for k in 0..sample_count {
        let x = sample_point(rng, model.data_dim());
        let (t1, t2) = (sample_theta(rng, model.param_dim()), sample_theta(rng, model.param_dim()));
        let diff: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a - b).collect();
        let sq = dot(&diff, &diff);
        if sq == 0.0 {
            continue;
        }
        let lhs = model.loss(&x, &t1) - model.loss(&x, &t2) - dot(&model.grad(&x, &t2), &diff);
        let ratio = lhs / (0.5 * mu * sq);
        if ratio < 1.0 - 1e-6 {
            return Err(FedError::AssumptionViolation(format!(
                "strong convexity ratio {ratio} below 1 for mu={mu} at pair {k}: x={x:?}, theta1={t1:?}, theta2={t2:?}"
            )));
        }
        worst = worst.min(ratio);
    }
    Ok(worst)
}

/// Plain full-gradient descent with step `1/l1`; returns every iterate.
pub fn exact_gd(model: &dyn LossModel, data: &Dataset, theta0: &[f64], l1: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut traj = vec![theta0.to_vec()];
    for step in 1..=steps {
        let prev = traj.last().expect("non-empty");
        let g = full_gradient(model, data, prev)?;
        let next: Vec<f64> = prev.iter().zip(&g).map(|(t, gi)| t - gi / l1).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(FedError::DivergenceDetected { step });
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Minimizer estimate from long-run exact GD.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reference {
    pub theta: Vec<f64>,
    pub f_star: f64,
    pub steps: usize,
    pub grad_norm: f64,
}

pub const REFERENCE_MAX_STEPS: usize = 100_000;
pub const REFERENCE_GRAD_TOL: f64 = 1e-10;

/// Runs exact GD with step `1/l1` from zero for up to 10⁵ steps, stopping
/// once `‖∇F‖ < 1e-10`.
pub fn reference_minimum(model: &dyn LossModel, data: &Dataset, l1: f64) -> Result<Reference> {
    let mut theta = vec![0.0; model.param_dim()];
    let mut steps = 0;
    loop {
        let g = full_gradient(model, data, &theta)?;
        let grad_norm = norm2(&g);
        if grad_norm < REFERENCE_GRAD_TOL || steps == REFERENCE_MAX_STEPS {
            let f_star = empirical_risk(model, data, &theta)?;
            return Ok(Reference {
                theta,
                f_star,
                steps,
                grad_norm,
            });
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= gi / l1;
        }
        steps += 1;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(FedError::DivergenceDetected { step: steps });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;

    fn logistic_data(seed: u64) -> Dataset {
        Dataset::uniform(3, 4, 5, 6, seed).unwrap()
    }

    #[test]
    fn dataset_counts_and_validation() {
        let ds = Dataset::uniform(2, 3, 4, 2, 7).unwrap();
        assert_eq!((ds.m(), ds.s(), ds.r(), ds.n()), (3, 4, 2, 14));
        assert_eq!(ds.points().count(), 14);
        assert!(Dataset::uniform(2, 3, 4, 0, 7).is_err());
        assert!(Dataset::new(1, vec![vec![1.5]], vec![]).is_err());
        assert!(Dataset::new(1, vec![vec![0.5]], vec![vec![vec![0.1]], vec![]]).is_err());
        let server_only = Dataset::uniform(2, 0, 0, 3, 1).unwrap();
        assert_eq!(server_only.n(), 3);
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::uniform(2, 3, 4, 2, 7).unwrap();
        let csv = ds.to_csv();
        assert_eq!(csv.lines().count(), 14);
        assert!(csv.lines().next().unwrap().starts_with("0,"));
        let back = Dataset::from_csv(&ds.header(), &csv).unwrap();
        assert_eq!(back, ds);
        let mut bad = ds.header();
        bad.n = 15;
        assert!(Dataset::from_csv(&bad, &csv).is_err());
    }

    #[test]
    fn risk_examples() {
        let ds = logistic_data(1);
        let zero = ZeroLoss { p: 2, d: 3 };
        assert_eq!(empirical_risk(&zero, &ds, &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(full_gradient(&zero, &ds, &[0.3, -1.0]).unwrap(), vec![0.0, 0.0]);

        let unreg = SoftLabelLogistic::new(3, 0.0).unwrap();
        assert_abs_diff_eq!(
            empirical_risk(&unreg, &ds, &[0.0, 0.0]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );

        let single = Dataset::new(3, vec![vec![1.0, 0.0, 1.0]], vec![]).unwrap();
        let m = SoftLabelLogistic::new(3, 0.1).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln() + 0.05;
        assert_abs_diff_eq!(empirical_risk(&m, &single, &[1.0, 0.0]).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn logistic_gradient_at_origin() {
        let x = [0.3, 0.8, 0.9];
        let g = SoftLabelLogistic::new(3, 0.0).unwrap().grad(&x, &[0.0, 0.0]);
        assert_abs_diff_eq!(g[0], (0.5 - 0.9) * 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], (0.5 - 0.9) * 0.8, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = logistic_data(2);
        let m = SoftLabelLogistic::new(3, 0.3).unwrap();
        let mut rng = stream_rng(2, 99);
        for _ in 0..100 {
            let theta = sample_theta(&mut rng, 2);
            let g = full_gradient(&m, &ds, &theta).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += h;
                tm[i] -= h;
                let fd = (empirical_risk(&m, &ds, &tp).unwrap() - empirical_risk(&m, &ds, &tm).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "fd={fd} g={}", g[i]);
            }
        }
    }

    #[test]
    fn split_and_flat_sums_agree() {
        let m = SoftLabelLogistic::new(4, 0.2).unwrap();
        for seed in 0..20 {
            let ds = Dataset::uniform(4, 1 + seed as usize % 5, 3, 2 + seed as usize % 3, seed).unwrap();
            let theta = [0.4, -1.2, 2.0];
            let a = empirical_risk(&m, &ds, &theta).unwrap();
            let b = empirical_risk_flat(&m, &ds, &theta).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn logistic_risk_is_convex_along_segments() {
        let ds = logistic_data(4);
        let m = SoftLabelLogistic::new(3, 0.0).unwrap();
        let mut rng = stream_rng(4, 1);
        for _ in 0..200 {
            let t1 = sample_theta(&mut rng, 2);
            let t2 = sample_theta(&mut rng, 2);
            let lam: f64 = rng.random();
            let mid: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
            let f = |t: &[f64]| empirical_risk(&m, &ds, t).unwrap();
            assert!(f(&mid) <= lam * f(&t1) + (1.0 - lam) * f(&t2) + 1e-12);
        }
    }

    #[test]
    fn logistic_constants_examples() {
        assert_abs_diff_eq!(logistic_constants(785, 0.1).unwrap().l1.unwrap(), 392.1, epsilon = 1e-12);
        assert_eq!(logistic_constants(3, 1.0).unwrap().l1, Some(2.0));
        let c = logistic_constants(11, 0.5).unwrap();
        assert_eq!((c.l1, c.eta, c.l2), (Some(5.5), Some(2.0), Some(1.0)));
        assert!(logistic_constants(1, 1.0).is_err());
        assert!(logistic_constants(3, 0.0).is_err());
    }

    #[test]
    fn smoothness_checks() {
        let mut rng = stream_rng(5, 0);
        let lg = SoftLabelLogistic::new(3, 1.0).unwrap();
        assert!(check_smoothness_in_theta(&lg, 200, &mut rng).unwrap() <= 2.0);
        let q = Quadratic { p: 3, d: 2 };
        assert_abs_diff_eq!(check_smoothness_in_theta(&q, 200, &mut rng).unwrap(), 1.0, epsilon = 1e-9);
        let liar = Declared {
            inner: Quadratic { p: 3, d: 2 },
            constants: ModelConstants {
                l1: Some(0.5),
                mu: Some(2.0),
                ..Default::default()
            },
        };
        assert!(matches!(
            check_smoothness_in_theta(&liar, 10, &mut rng),
            Err(FedError::AssumptionViolation(_))
        ));
        assert!(matches!(
            check_strong_convexity(&liar, 10, &mut rng),
            Err(FedError::AssumptionViolation(_))
        ));
        assert_abs_diff_eq!(check_strong_convexity(&q, 200, &mut rng).unwrap(), 1.0, epsilon = 1e-9);
        assert!(check_strong_convexity(&lg, 200, &mut rng).unwrap() >= 1.0 - 1e-6);
    }

    #[test]
    fn separable_model_is_consistent() {
        let m = SeparableModel::random(2, 3, 3, 0.5, 1).unwrap();
        let mut rng = stream_rng(6, 0);
        assert!(check_smoothness_in_theta(&m, 200, &mut rng).is_ok());
        assert!(check_strong_convexity(&m, 200, &mut rng).is_ok());
        let x = [0.3, 0.7];
        let theta = [0.2, -0.4, 1.1];
        let g = m.grad(&x, &theta);
        for i in 0..3 {
            let h = 1e-6;
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += h;
            tm[i] -= h;
            let fd = (m.loss(&x, &tp) - m.loss(&x, &tm)) / (2.0 * h);
            assert_abs_diff_eq!(fd, g[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn partial_agrees_with_grad_for_all_models() {
        let models: Vec<Box<dyn LossModel>> = vec![
            Box::new(ZeroLoss { p: 2, d: 3 }),
            Box::new(Quadratic { p: 2, d: 3 }),
            Box::new(LinearParam { a: vec![1.0, -2.0], d: 3 }),
            Box::new(SoftLabelLogistic::new(3, 0.4).unwrap()),
            Box::new(SeparableModel::random(3, 2, 3, 0.2, 9).unwrap()),
        ];
        let mut rng = stream_rng(8, 0);
        for m in &models {
            for _ in 0..20 {
                let x = sample_point(&mut rng, 3);
                let t = sample_theta(&mut rng, 2);
                let g = m.grad(&x, &t);
                for (i, gi) in g.iter().enumerate() {
                    assert!((m.partial(i, &x, &t) - gi).abs() <= 1e-9, "{}", m.name());
                }
            }
            if let (Some(l1), Some(mu)) = (m.constants().l1, m.constants().mu) {
                assert!(l1 / mu >= 1.0);
            }
        }
    }

    #[test]
    fn epsilon_approximation_is_inclusive() {
        assert!(is_epsilon_approximate(1.0, 1.0, 0.1));
        assert!(!is_epsilon_approximate(1.2, 1.0, 0.1));
        assert!(is_epsilon_approximate(1.05, 1.0, 0.05));
    }

    #[test]
    fn reference_minimum_reaches_stationarity() {
        let ds = logistic_data(3);
        let m = SoftLabelLogistic::new(3, 0.5).unwrap();
        let r = reference_minimum(&m, &ds, 1.5).unwrap();
        assert!(r.grad_norm < REFERENCE_GRAD_TOL);
        assert!(r.steps < REFERENCE_MAX_STEPS);
        let traj = exact_gd(&m, &ds, &[0.0, 0.0], 1.5, 5).unwrap();
        assert_eq!(traj.len(), 6);
        assert!(empirical_risk(&m, &ds, &traj[5]).unwrap() >= r.f_star - 1e-15);
    }
}
