//! ℓ1 coverings of the unit hypercube, the induced partition, piecewise
//! Taylor approximation and the low-rank bound for latent variable models.

use std::f64::consts::{E, FRAC_PI_2, PI};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numerics::{dist1, enumerate_multi_indices, finite_diff_partial, singular_values, truncation_error_sq, Matrix, MultiIndex};

/// Relative slack on ball membership, so lattice corners that sit exactly
/// on a sphere are not lost to rounding.
const BALL_TOL: f64 = 1e-12;
/// Largest lattice the net builder will enumerate.
pub const MAX_CENTERS: usize = 20_000;

/// Centers of closed ℓ1 balls of radius `1/q` whose union contains `[0,1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Net {
    pub d: usize,
    pub q: u64,
    pub centers: Vec<Vec<f64>>,
}

impl L1Net {
    pub fn radius(&self) -> f64 {
        1.0 / self.q as f64
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn in_ball(&self, x: &[f64], j: usize) -> bool {
        dist1(x, &self.centers[j]) <= self.radius() * (1.0 + BALL_TOL)
    }
}

/// `d!·(q+1)^d`, or `None` if it does not fit in a `u64`.
pub fn volumetric_bound(d: usize, q: u64) -> Option<u64> {
    let mut acc: u64 = 1;
    for i in 1..=d as u64 {
        acc = acc.checked_mul(i)?.checked_mul(q.checked_add(1)?)?;
    }
    Some(acc)
}

/// Axis-aligned lattice with `k = ⌈dq/2⌉` cells per axis, so every cell lies
/// in the ℓ1 ball of radius `1/q` around its midpoint, followed by a greedy
/// pass that drops a center whenever all of its cells fit inside a single
/// other surviving ball.
pub fn build_l1_net(d: usize, q: u64) -> Result<L1Net> {
    if d == 0 || q == 0 {
        return Err(FedError::InvalidArgument("need d >= 1 and q >= 1".into()));
    }
    let bound = volumetric_bound(d, q)
        .ok_or_else(|| FedError::TooLarge(format!("d!(q+1)^d overflows for d={d}, q={q}")))?;
    let k = (d as u64 * q).div_ceil(2) as usize;
    let total = (0..d).try_fold(1usize, |acc, _| acc.checked_mul(k)).filter(|&n| n <= MAX_CENTERS);
    let total = total.ok_or_else(|| {
        FedError::TooLarge(format!("lattice with {k}^{d} cells exceeds {MAX_CENTERS}"))
    })?;
    let h = 1.0 / k as f64;

    let mut cells: Vec<Vec<usize>> = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        cells.push(idx.clone());
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < k {
                break;
            }
            *slot = 0;
        }
    }
    let centers: Vec<Vec<f64>> = cells
        .iter()
        .map(|c| c.iter().map(|&i| (2 * i + 1) as f64 / (2 * k) as f64).collect())
        .collect();
    let net = L1Net { d, q, centers };

    // greedy redundancy removal
    let vertices = |cell: &[usize]| -> Vec<Vec<f64>> {
        (0..1usize << d)
            .map(|mask| {
                cell.iter()
                    .enumerate()
                    .map(|(a, &i)| (i + ((mask >> a) & 1)) as f64 * h)
                    .collect()
            })
            .collect()
    };
    let reach = net.radius() + d as f64 * h;
    let mut owned: Vec<Vec<usize>> = (0..total).map(|j| vec![j]).collect();
    let mut alive = vec![true; total];
    for j in 0..total {
        let verts: Vec<Vec<f64>> = owned[j].iter().flat_map(|&c| vertices(&cells[c])).collect();
        let host = (0..total).find(|&i| {
            i != j
                && alive[i]
                && dist1(&net.centers[i], &net.centers[j]) <= reach
                && verts.iter().all(|v| net.in_ball(v, i))
        });
        if let Some(i) = host {
            alive[j] = false;
            let moved = std::mem::take(&mut owned[j]);
            owned[i].extend(moved);
        }
    }
    let centers: Vec<Vec<f64>> = net
        .centers
        .into_iter()
        .zip(&alive)
        .filter_map(|(c, &a)| a.then_some(c))
        .collect();
    if centers.len() as u64 > bound {
        return Err(FedError::Internal(format!(
            "net of size {} exceeds the volumetric bound {bound}",
            centers.len()
        )));
    }
    Ok(L1Net { d, q, centers })
}

/// Index (0-based) of the first ball containing `x`; ties go to the earlier ball.
pub fn assign_cell(net: &L1Net, x: &[f64]) -> Result<usize> {
    if x.len() != net.d {
        return Err(FedError::DimensionMismatch(format!(
            "point of dim {} for a net of dim {}",
            x.len(),
            net.d
        )));
    }
    (0..net.len())
        .find(|&j| net.in_ball(x, j))
        .ok_or_else(|| FedError::Internal(format!("no ball covers {x:?}")))
}

/// Function `g(x; ϑ)` on `[0,1]^d × R^p` with derivatives in `x`.
pub trait Bivariate: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], theta: &[f64]) -> f64;
    /// `∇ₓˢ g(x; ϑ)`; defaults to central finite differences.
    fn derivative(&self, s: &MultiIndex, x: &[f64], theta: &[f64]) -> Result<f64> {
        if s.order() == 0 {
            return Ok(self.value(x, theta));
        }
        finite_diff_partial(|y| self.value(y, theta), x, s, 1e-3)
    }
}

/// Closure-backed [`Bivariate`] using finite-difference derivatives.
pub struct FnBivariate<F> {
    pub d: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> Bivariate for FnBivariate<F> {
    fn dim(&self) -> usize {
        self.d
    }
    fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        (self.f)(x, theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HolderKind {
    /// `c`
    Constant(f64),
    /// `aᵀx + ϑ₁`
    Linear(Vec<f64>),
    /// `sin(π Σ x_i + ϑ₁)`
    SinSum,
    /// `Π_i sin(π x_i + ϑ_i)`
    SinProduct,
    /// `|cos(π(x₁ + ϑ₁))|`
    AbsCosShift,
}

/// Test function with known Hölder parameters `(η, L2)` in the ℓ1 sense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderFunction {
    pub name: String,
    pub d: usize,
    pub eta: f64,
    pub l2: f64,
    pub kind: HolderKind,
}

impl HolderFunction {
    pub fn l(&self) -> usize {
        self.eta.ceil() as usize - 1
    }

    /// Length of `ϑ` the function reads.
    pub fn param_dim(&self) -> usize {
        match self.kind {
            HolderKind::SinProduct => self.d,
            _ => 1,
        }
    }
}

impl Bivariate for HolderFunction {
    fn dim(&self) -> usize {
        self.d
    }

    fn value(&self, x: &[f64], theta: &[f64]) -> f64 {
        match &self.kind {
            HolderKind::Constant(c) => *c,
            HolderKind::Linear(a) => a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + theta[0],
            HolderKind::SinSum => (PI * x.iter().sum::<f64>() + theta[0]).sin(),
            HolderKind::SinProduct => x.iter().zip(theta).map(|(x, t)| (PI * x + t).sin()).product(),
            HolderKind::AbsCosShift => (PI * (x[0] + theta[0])).cos().abs(),
        }
    }

    fn derivative(&self, s: &MultiIndex, x: &[f64], theta: &[f64]) -> Result<f64> {
        let order = s.order();
        if order == 0 {
            return Ok(self.value(x, theta));
        }
        Ok(match &self.kind {
            HolderKind::Constant(_) => 0.0,
            HolderKind::Linear(a) => match (order, s.0.iter().position(|&k| k == 1)) {
                (1, Some(i)) => a[i],
                _ => 0.0,
            },
            HolderKind::SinSum => {
                PI.powi(order as i32) * (PI * x.iter().sum::<f64>() + theta[0] + order as f64 * FRAC_PI_2).sin()
            }
            HolderKind::SinProduct => s
                .0
                .iter()
                .zip(x.iter().zip(theta))
                .map(|(&k, (x, t))| PI.powi(k as i32) * (PI * x + t + k as f64 * FRAC_PI_2).sin())
                .product(),
            HolderKind::AbsCosShift => {
                return Err(FedError::Unsupported("|cos| has no classical derivatives".into()))
            }
        })
    }
}

/// The registered Hölder suite for `η ∈ {1, 2}` and `d ∈ {1, 2}`.
pub fn holder_suite() -> Vec<HolderFunction> {
    let mut out = Vec::new();
    for d in 1..=2usize {
        for eta in [1.0, 2.0] {
            let lip = eta == 1.0;
            let push = |out: &mut Vec<HolderFunction>, name: &str, l2: f64, kind: HolderKind| {
                out.push(HolderFunction {
                    name: format!("{name}(d={d}, eta={eta})"),
                    d,
                    eta,
                    l2,
                    kind,
                })
            };
            push(&mut out, "constant", 1.0, HolderKind::Constant(0.7));
            let a: Vec<f64> = [0.6, -0.3][..d].to_vec();
            push(&mut out, "linear", if lip { 0.6 } else { 1.0 }, HolderKind::Linear(a));
            push(&mut out, "sin_sum", if lip { PI } else { PI * PI }, HolderKind::SinSum);
            push(&mut out, "sin_product", if lip { PI } else { PI * PI }, HolderKind::SinProduct);
            if d == 1 && lip {
                push(&mut out, "abs_cos_shift", PI, HolderKind::AbsCosShift);
            }
        }
    }
    out
}

/// Piecewise Taylor polynomial over the partition induced by a net.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiecewisePoly {
    pub net: L1Net,
    pub l: usize,
    pub indices: Vec<MultiIndex>,
    /// `coeffs[j][w] = ∇ˢ g(z_j; ϑ) / s!` for `s = indices[w]`.
    pub coeffs: Vec<Vec<f64>>,
}

impl PiecewisePoly {
    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        let j = assign_cell(&self.net, y)?;
        Ok(self.eval_cell(j, y))
    }

    /// Taylor polynomial of cell `j` evaluated at `y`.
    pub fn eval_cell(&self, j: usize, y: &[f64]) -> f64 {
        let z = &self.net.centers[j];
        let shift: Vec<f64> = y.iter().zip(z).map(|(a, b)| a - b).collect();
        self.indices
            .iter()
            .zip(&self.coeffs[j])
            .map(|(s, c)| c * s.monomial(&shift))
            .sum()
    }
}

/// Degree-`l` Taylor expansion of `g(·; ϑ)` around every center.
pub fn taylor_piecewise(g: &dyn Bivariate, theta: &[f64], net: &L1Net, l: usize) -> Result<PiecewisePoly> {
    if g.dim() != net.d {
        return Err(FedError::DimensionMismatch("function and net dimensions differ".into()));
    }
    let indices = enumerate_multi_indices(net.d, l);
    let coeffs = net
        .centers
        .par_iter()
        .map(|z| {
            indices
                .iter()
                .map(|s| Ok(g.derivative(s, z, theta)? / s.factorial_f64()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PiecewisePoly {
        net: net.clone(),
        l,
        indices,
        coeffs,
    })
}

/// `L2 / (l! q^η)`, requiring `l = ⌈η⌉ − 1`.
pub fn uniform_error_bound(l2: f64, l: usize, q: f64, eta: f64) -> Result<f64> {
    if !(l2 > 0.0 && q > 0.0 && eta > 0.0) {
        return Err(FedError::InvalidArgument("L2, q and eta must be positive".into()));
    }
    if eta.ceil() as usize - 1 != l {
        return Err(FedError::InconsistentParams(format!("l={l} but ceil(eta)-1={}", eta.ceil() - 1.0)));
    }
    let l_fact: f64 = (1..=l).map(|i| i as f64).product();
    Ok(l2 / (l_fact * q.powf(eta)))
}

/// Deterministic evaluation points: a tensor grid of about `10⁴·d` points,
/// every center, every ball vertex clipped to the cube, and midpoints of
/// nearby center pairs.
pub fn error_grid(net: &L1Net) -> Vec<Vec<f64>> {
    let d = net.d;
    let per_axis = ((1e4 * d as f64).powf(1.0 / d as f64).ceil() as usize).max(2);
    let total = per_axis.pow(d as u32);
    let mut pts = Vec::with_capacity(total + net.len() * (2 * d + 1));
    for flat in 0..total {
        let mut rem = flat;
        let p: Vec<f64> = (0..d)
            .map(|_| {
                let i = rem % per_axis;
                rem /= per_axis;
                i as f64 / (per_axis - 1) as f64
            })
            .collect();
        pts.push(p);
    }
    let rad = net.radius();
    for (j, z) in net.centers.iter().enumerate() {
        pts.push(z.clone());
        for a in 0..d {
            for sign in [-1.0, 1.0] {
                let mut v = z.clone();
                v[a] = (v[a] + sign * rad).clamp(0.0, 1.0);
                pts.push(v);
            }
        }
        for w in &net.centers[j + 1..] {
            if dist1(z, w) <= 2.0 * rad {
                pts.push(z.iter().zip(w).map(|(a, b)| 0.5 * (a + b)).collect());
            }
        }
    }
    pts
}

/// `max |g(y; ϑ) − P(y)|` over [`error_grid`].
pub fn sup_error(g: &dyn Bivariate, theta: &[f64], poly: &PiecewisePoly) -> Result<f64> {
    let errs = error_grid(&poly.net)
        .par_iter()
        .map(|y| Ok((g.value(y, theta) - poly.eval(y)?).abs()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// One row of the covering report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveringRow {
    pub q: u64,
    pub net_size: usize,
    pub sup_error: f64,
    pub bound: f64,
}

pub const COVERING_CSV_HEADER: &str = "q,net_size,sup_error,bound";

impl CoveringRow {
    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{}", self.q, self.net_size, self.sup_error, self.bound)
    }
}

/// Worst-case sup error over the sampled parameters for each `q`.
pub fn lemma1_rows(f: &HolderFunction, thetas: &[Vec<f64>], qs: &[u64]) -> Result<Vec<CoveringRow>> {
    qs.iter()
        .map(|&q| {
            let net = build_l1_net(f.d, q)?;
            let mut worst: f64 = 0.0;
            for theta in thetas {
                let poly = taylor_piecewise(f, theta, &net, f.l())?;
                worst = worst.max(sup_error(f, theta, &poly)?);
            }
            Ok(CoveringRow {
                q,
                net_size: net.len(),
                sup_error: worst,
                bound: uniform_error_bound(f.l2, f.l(), q as f64, f.eta)?,
            })
        })
        .collect()
}

/// `M_{i,j} = g(y⁽ⁱ⁾; ϑ⁽ʲ⁾)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentMatrix {
    pub m: Matrix,
    pub y: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
}

impl LatentMatrix {
    /// Largest deviation between stored entries and fresh evaluations of `g`.
    pub fn reevaluation_error(&self, g: &dyn Bivariate) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, y) in self.y.iter().enumerate() {
            for (j, t) in self.theta.iter().enumerate() {
                worst = worst.max((self.m[(i, j)] - g.value(y, t)).abs());
            }
        }
        worst
    }
}

pub fn build_latent_matrix(g: &dyn Bivariate, ys: &[Vec<f64>], thetas: &[Vec<f64>]) -> Result<LatentMatrix> {
    if ys.iter().any(|y| y.len() != g.dim() || y.iter().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(FedError::InvalidArgument("latent points must lie in [0,1]^d".into()));
    }
    let m = Matrix::from_fn(ys.len(), thetas.len(), |i, j| g.value(&ys[i], &thetas[j]));
    if !m.is_finite() {
        return Err(FedError::InvalidArgument("latent function produced non-finite values".into()));
    }
    Ok(LatentMatrix {
        m,
        y: ys.to_vec(),
        theta: thetas.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Smallest rank for which the low-rank bound is stated: `e√d·2^d·(l+d)^d`.
pub fn theorem1_threshold(d: usize, l: usize) -> f64 {
    let df = d as f64;
    E * df.sqrt() * 2f64.powf(df) * ((l + d) as f64).powf(df)
}

/// `L2² e^{2η/d} d^{η/d} 4^η (l+d)^{2η} / (l!)² · r^{−2η/d}`.
pub fn theorem1_rhs(r: usize, eta: f64, l2: f64, d: usize) -> f64 {
    let l = eta.ceil() as usize - 1;
    let df = d as f64;
    let l_fact: f64 = (1..=l).map(|i| i as f64).product();
    l2 * l2 * (2.0 * eta / df).exp() * df.powf(eta / df) * 4f64.powf(eta) * ((l + d) as f64).powf(2.0 * eta)
        / (l_fact * l_fact)
        * (r as f64).powf(-2.0 * eta / df)
}

/// Compares `(1/nk)‖M − M_r‖_F²` against the low-rank bound.
pub fn theorem1_check(lm: &LatentMatrix, r: usize, eta: f64, l2: f64, d: usize) -> Result<Theorem1Report> {
    if !(eta > 0.0 && l2 > 0.0) || d == 0 {
        return Err(FedError::InvalidArgument("need eta > 0, L2 > 0, d >= 1".into()));
    }
    let l = eta.ceil() as usize - 1;
    let threshold = theorem1_threshold(d, l);
    if (r as f64) < threshold {
        return Err(FedError::NotApplicable(format!("r={r} below threshold {threshold:.3}")));
    }
    let (n, k) = (lm.m.rows(), lm.m.cols());
    let lhs = truncation_error_sq(&lm.m, r)? / (n * k) as f64;
    let rhs = theorem1_rhs(r, eta, l2, d);
    Ok(Theorem1Report {
        lhs,
        rhs,
        pass: lhs <= rhs,
    })
}

/// Condition number of `Φ_{w,j} = φ_w(x⁽ʲ⁾)` where the `φ_w` are the
/// cell-restricted monomials `(x − z_I)^s 1{x ∈ I}`.
pub fn phi_condition(net: &L1Net, l: usize, points: &[Vec<f64>]) -> Result<f64> {
    let indices = enumerate_multi_indices(net.d, l);
    let rows = net.len() * indices.len();
    if points.len() != rows {
        return Err(FedError::DimensionMismatch(format!(
            "{} points for {rows} basis functions",
            points.len()
        )));
    }
    let cells = points.iter().map(|x| assign_cell(net, x)).collect::<Result<Vec<_>>>()?;
    let phi = Matrix::from_fn(rows, points.len(), |w, j| {
        let (cell, s) = (w / indices.len(), &indices[w % indices.len()]);
        if cells[j] != cell {
            return 0.0;
        }
        let shift: Vec<f64> = points[j].iter().zip(&net.centers[cell]).map(|(a, b)| a - b).collect();
        s.monomial(&shift)
    });
    let sv = singular_values(&phi);
    let (top, bottom) = (sv[0], *sv.last().expect("non-empty"));
    Ok(if bottom > 0.0 { top / bottom } else { f64::INFINITY })
}
