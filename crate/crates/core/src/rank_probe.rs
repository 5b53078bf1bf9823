//! Approximate-rank probing of per-coordinate gradient slices.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numerics::{dot, singular_values, Matrix};
use crate::problem::{sigmoid, Dataset, LossModel, ModelConstants};
use crate::rng::{stream_rng, streams};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub k: usize,
    #[serde(default = "default_eps_w")]
    pub eps_w: f64,
    #[serde(default = "default_energy")]
    pub energy_fraction: f64,
    pub seed: u64,
    /// Histogram at most this many randomly chosen coordinates.
    #[serde(default)]
    pub subsample: Option<usize>,
}

fn default_eps_w() -> f64 {
    0.005
}

fn default_energy() -> f64 {
    0.9
}

impl ProbeConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            eps_w: default_eps_w(),
            energy_fraction: default_energy(),
            seed,
            subsample: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(FedError::InvalidArgument("k must be at least 2".into()));
        }
        if !(self.energy_fraction > 0.0 && self.energy_fraction <= 1.0) {
            return Err(FedError::InvalidArgument("energy fraction outside (0,1]".into()));
        }
        if !(self.eps_w >= 0.0) {
            return Err(FedError::InvalidArgument("eps_w must be non-negative".into()));
        }
        Ok(())
    }
}

/// Smallest `J` with `Σ_{i≤J} σ_i² ≥ fraction · ‖A‖_F²`.
pub fn approximate_rank(a: &Matrix, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FedError::InvalidArgument(format!("fraction={fraction} outside (0,1]")));
    }
    if a.max_abs() == 0.0 {
        return Err(FedError::ZeroMatrix);
    }
    let sv = singular_values(a);
    let floor = RANK_REL_TOL * sv[0];
    let energy: Vec<f64> = sv.iter().take_while(|&&s| s > floor).map(|s| s * s).collect();
    let target = fraction * energy.iter().sum::<f64>() * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (j, e) in energy.iter().enumerate() {
        acc += e;
        if acc >= target {
            return Ok(j + 1);
        }
    }
    Ok(energy.len())
}

/// Slices `M_q(i, j) = ∂f/∂θ_q(x⁽ⁱ⁾; θ⁽ʲ⁾)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientTensor {
    pub k: usize,
    pub p: usize,
    pub slices: Vec<Matrix>,
    pub thetas: Vec<Vec<f64>>,
}

/// Perturbs `θ*` as `θ⁽ʲ⁾ = θ* + (‖θ*‖₁/p) g_j` with `g_j ~ N(0, I)` and
/// evaluates every partial at every (point, perturbation) pair.
pub fn build_gradient_tensor(model: &dyn LossModel, points: &[Vec<f64>], theta_star: &[f64], seed: u64) -> Result<GradientTensor> {
    let p = model.param_dim();
    let k = points.len();
    if theta_star.len() != p || theta_star.iter().any(|t| !t.is_finite()) {
        return Err(FedError::InvalidArgument("theta* must be finite with length p".into()));
    }
    if k < 2 {
        return Err(FedError::InvalidArgument("need at least two points".into()));
    }
    let scale = theta_star.iter().map(|t| t.abs()).sum::<f64>() / p as f64;
    let mut rng = stream_rng(seed, streams::RANK_PROBE);
    let thetas: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            theta_star
                .iter()
                .map(|t| t + scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let grads: Vec<Vec<Vec<f64>>> = points
        .par_iter()
        .map(|x| thetas.iter().map(|t| model.grad(x, t)).collect())
        .collect();
    let slices = (0..p)
        .map(|q| Matrix::from_fn(k, k, |i, j| grads[i][j][q]))
        .collect();
    Ok(GradientTensor { k, p, slices, thetas })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    /// rank → number of coordinates; all-zero slices count as rank 0.
    pub counts: BTreeMap<usize, usize>,
    /// Coordinates that entered the histogram, ascending.
    pub coordinates: Vec<usize>,
}

pub const HISTOGRAM_CSV_HEADER: &str = "rank,frequency";

impl RankHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTOGRAM_CSV_HEADER}\n");
        for (rank, freq) in &self.counts {
            out.push_str(&format!("{rank},{freq}\n"));
        }
        out
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

pub fn rank_histogram(tensor: &GradientTensor, theta_star: &[f64], config: &ProbeConfig) -> Result<RankHistogram> {
    config.validate()?;
    if theta_star.len() != tensor.p {
        return Err(FedError::DimensionMismatch("theta* does not match the tensor".into()));
    }
    let mut coordinates: Vec<usize> = (0..tensor.p).filter(|&q| theta_star[q].abs() >= config.eps_w).collect();
    if coordinates.is_empty() {
        return Err(FedError::EmptySelection);
    }
    if let Some(limit) = config.subsample.filter(|&l| l < coordinates.len()) {
        let mut rng = stream_rng(config.seed, streams::RANK_PROBE + (1 << 32));
        let mut picked: Vec<usize> = sample(&mut rng, coordinates.len(), limit)
            .into_iter()
            .map(|i| coordinates[i])
            .collect();
        picked.sort_unstable();
        coordinates = picked;
    }
    let ranks = coordinates
        .par_iter()
        .map(|&q| match approximate_rank(&tensor.slices[q], config.energy_fraction) {
            Err(FedError::ZeroMatrix) => Ok(0),
            other => other,
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = BTreeMap::new();
    for r in ranks {
        *counts.entry(r).or_insert(0) += 1;
    }
    Ok(RankHistogram { counts, coordinates })
}

/// Largest parameter count [`TinyMlp`] accepts.
pub const MLP_MAX_PARAMS: usize = 200;

/// One hidden layer of logistic units and a logistic output, trained with
/// soft-label cross-entropy plus `(μ/2)‖θ‖²`. Points are `(y, z)` as for
/// the logistic model. Parameters are laid out as `W` (row-major), `b₁`,
/// `w₂`, `b₂`.
#[derive(Debug, Clone)]
pub struct TinyMlp {
    features: usize,
    hidden: usize,
    mu: f64,
}

impl TinyMlp {
    pub fn new(d: usize, hidden: usize, mu: f64) -> Result<Self> {
        if d < 2 || hidden == 0 {
            return Err(FedError::InvalidArgument("need d >= 2 and a hidden unit".into()));
        }
        if !(mu >= 0.0) {
            return Err(FedError::InvalidArgument("mu must be non-negative".into()));
        }
        let mlp = Self {
            features: d - 1,
            hidden,
            mu,
        };
        if mlp.param_dim() > MLP_MAX_PARAMS {
            return Err(FedError::TooLarge(format!("{} parameters exceed {MLP_MAX_PARAMS}", mlp.param_dim())));
        }
        Ok(mlp)
    }

    /// Gaussian initialization with standard deviation 0.5.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, streams::RANK_PROBE + (2 << 32));
        let dist = Normal::new(0.0, 0.5).expect("valid normal");
        (0..self.param_dim()).map(|_| rng.sample(dist)).collect()
    }

    fn forward(&self, y: &[f64], theta: &[f64]) -> (Vec<f64>, f64) {
        let (f, h) = (self.features, self.hidden);
        let (w, rest) = theta.split_at(h * f);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        let z: Vec<f64> = (0..h).map(|j| sigmoid(dot(&w[j * f..(j + 1) * f], y) + b1[j])).collect();
        let out = dot(w2, &z) + b2[0];
        (z, out)
    }
}

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

impl LossModel for TinyMlp {
    fn name(&self) -> String {
        format!("mlp(features={}, hidden={})", self.features, self.hidden)
    }
    fn param_dim(&self) -> usize {
        self.hidden * self.features + 2 * self.hidden + 1
    }
    fn data_dim(&self) -> usize {
        self.features + 1
    }
    fn loss(&self, x: &[f64], theta: &[f64]) -> f64 {
        let (y, label) = (&x[..self.features], x[self.features]);
        let (_, out) = self.forward(y, theta);
        label * softplus(-out) + (1.0 - label) * softplus(out) + 0.5 * self.mu * dot(theta, theta)
    }
    fn grad(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let (f, h) = (self.features, self.hidden);
        let (y, label) = (&x[..f], x[f]);
        let (z, out) = self.forward(y, theta);
        let c = sigmoid(out) - label;
        let w2 = &theta[h * f + h..h * f + 2 * h];
        let mut g = vec![0.0; self.param_dim()];
        for j in 0..h {
            let da = c * w2[j] * z[j] * (1.0 - z[j]);
            for k in 0..f {
                g[j * f + k] = da * y[k];
            }
            g[h * f + j] = da;
            g[h * f + h + j] = c * z[j];
        }
        g[h * f + 2 * h] = c;
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += self.mu * t;
        }
        g
    }
    fn constants(&self) -> ModelConstants {
        ModelConstants::default()
    }
}

/// Two Gaussian blobs (centers 0.3 and 0.7 per feature, sd 0.1, clamped to
/// the cube) with soft labels 0.1 and 0.9, all held at the server.
pub fn blob_dataset(d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d < 2 || n == 0 {
        return Err(FedError::InvalidArgument("need d >= 2 and n >= 1".into()));
    }
    let mut rng = stream_rng(seed, streams::DATASET);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let points = (0..n)
        .map(|i| {
            let (center, label): (f64, f64) = if i % 2 == 0 { (0.3, 0.1) } else { (0.7, 0.9) };
            let mut x: Vec<f64> = (0..d - 1)
                .map(|_| (center + rng.sample(noise)).clamp(0.0, 1.0))
                .collect();
            x.push(label);
            x
        })
        .collect();
    Dataset::new(d, points, vec![])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_partial;
    use crate::numerics::MultiIndex;
    use crate::problem::{exact_gd, LinearParam, SeparableModel, SoftLabelLogistic};

    #[test]
    fn approximate_rank_examples() {
        assert_eq!(approximate_rank(&Matrix::identity(5), 0.9).unwrap(), 5);
        let outer = Matrix::from_fn(4, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        assert_eq!(approximate_rank(&outer, 0.9).unwrap(), 1);
        assert_eq!(approximate_rank(&Matrix::diag(&[3.0, 1.0]), 0.9).unwrap(), 1);
        assert_eq!(approximate_rank(&Matrix::diag(&[3.0, 1.0]), 0.95).unwrap(), 2);
        assert!(matches!(approximate_rank(&Matrix::zeros(3, 3), 0.9), Err(FedError::ZeroMatrix)));
    }

    #[test]
    fn constant_partials_give_rank_one_slices() {
        let model = LinearParam { a: vec![0.3, -2.0, 1.0], d: 2 };
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 6.0, 0.5]).collect();
        let theta = vec![0.1, 0.2, 0.3];
        let t = build_gradient_tensor(&model, &pts, &theta, 1).unwrap();
        let h = rank_histogram(&t, &theta, &ProbeConfig::new(6, 1)).unwrap();
        assert_eq!(h.counts, BTreeMap::from([(1, 3)]));
    }

    #[test]
    fn separable_slices_are_low_rank() {
        let model = SeparableModel::random(2, 4, 3, 0.5, 7).unwrap();
        let data = Dataset::uniform(2, 0, 0, 12, 3).unwrap();
        let theta = vec![0.5, -0.7, 1.1, 0.2];
        let t = build_gradient_tensor(&model, data.server(), &theta, 2).unwrap();
        for fraction in [0.5, 0.9, 1.0] {
            for s in &t.slices {
                assert!(approximate_rank(s, fraction).unwrap() <= 3);
            }
        }
    }

    #[test]
    fn zero_parameter_is_empty_selection() {
        let model = LinearParam { a: vec![1.0, 1.0], d: 1 };
        let pts = vec![vec![0.1], vec![0.2]];
        let t = build_gradient_tensor(&model, &pts, &[0.0, 0.0], 0).unwrap();
        assert!(matches!(
            rank_histogram(&t, &[0.0, 0.0], &ProbeConfig::new(2, 0)),
            Err(FedError::EmptySelection)
        ));
    }

    #[test]
    fn subsample_limits_the_histogram() {
        let model = SoftLabelLogistic::new(6, 0.1).unwrap();
        let data = Dataset::uniform(6, 0, 0, 10, 1).unwrap();
        let theta = vec![0.4, -0.3, 0.9, 0.2, -1.0];
        let t = build_gradient_tensor(&model, data.server(), &theta, 3).unwrap();
        let mut cfg = ProbeConfig::new(10, 4);
        cfg.subsample = Some(3);
        let h = rank_histogram(&t, &theta, &cfg).unwrap();
        assert_eq!(h.total(), 3);
        assert_eq!(h.coordinates.len(), 3);
        assert_eq!(h, rank_histogram(&t, &theta, &cfg).unwrap());
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mlp = TinyMlp::new(4, 5, 0.01).unwrap();
        assert_eq!(mlp.param_dim(), 5 * 3 + 11);
        let theta = mlp.init_params(3);
        let x = [0.2, 0.8, 0.4, 0.9];
        let g = mlp.grad(&x, &theta);
        for (q, gq) in g.iter().enumerate() {
            let mut e = MultiIndex::zeros(theta.len());
            e.0[q] = 1;
            let fd = finite_diff_partial(|t| mlp.loss(&x, t), &theta, &e, 1e-5).unwrap();
            assert!((fd - gq).abs() < 1e-7, "coordinate {q}: {fd} vs {gq}");
        }
        assert!(matches!(TinyMlp::new(30, 8, 0.0), Err(FedError::TooLarge(_))));
    }

    #[test]
    fn trained_models_produce_histograms() {
        let data = blob_dataset(4, 60, 2).unwrap();
        let mlp = TinyMlp::new(4, 4, 1e-3).unwrap();
        let traj = exact_gd(&mlp, &data, &mlp.init_params(1), 2.0, 300).unwrap();
        let theta = traj.last().unwrap().clone();
        let t = build_gradient_tensor(&mlp, &data.server()[..30], &theta, 5).unwrap();
        assert!(t.slices.iter().all(|s| s.is_finite()));
        let h = rank_histogram(&t, &theta, &ProbeConfig::new(30, 5)).unwrap();
        assert!(h.total() >= 1);
    }
}
