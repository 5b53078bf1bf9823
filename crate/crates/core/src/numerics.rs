//! Small dense linear algebra and combinatorial helpers.
//!
//! Everything here is sized for matrices of at most a few hundred rows: the
//! SVD is a one-sided (Hestenes) Jacobi iteration and inversion is
//! Gauss-Jordan with partial pivoting.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Off-diagonal tolerance for the Jacobi sweeps.
pub const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 80;

/// Default relative threshold below which a matrix is declared singular.
pub const DEFAULT_SINGULAR_TOL: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FedError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FedError::InvalidArgument("non-finite matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FedError::DimensionMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(FedError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix: `vᵀ A`.
    pub fn left_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(FedError::DimensionMismatch(format!(
                "vector of length {} against {} rows",
                v.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(FedError::DimensionMismatch("shape mismatch in subtraction".into()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Thin SVD `A = U diag(s) Vᵀ` with `s` sorted in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows x k` with `k = min(rows, cols)`; columns for zero singular values are zero.
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    /// `cols x k`.
    pub v: Matrix,
}

impl Svd {
    /// Sum of the leading `r` rank-one terms.
    pub fn reconstruct(&self, r: usize) -> Matrix {
        let r = r.min(self.singular_values.len());
        Matrix::from_fn(self.u.rows(), self.v.rows(), |i, j| {
            (0..r)
                .map(|k| self.u[(i, k)] * self.singular_values[k] * self.v[(j, k)])
                .sum()
        })
    }
}

/// One-sided Jacobi SVD.
pub fn svd(a: &Matrix) -> Svd {
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose());
        return Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    svd_tall(a)
}

fn svd_tall(a: &Matrix) -> Svd {
    let (m, n) = (a.rows(), a.cols());
    // column-major working copies
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha: f64 = w[i].iter().map(|x| x * x).sum();
                let beta: f64 = w[j].iter().map(|x| x * x).sum();
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma: f64 = w[i].iter().zip(&w[j]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut sv = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        sv.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u[(i, k)] = w[src][i] / sigma;
            }
        }
        for i in 0..n {
            vm[(i, k)] = v[src][i];
        }
    }
    Svd {
        u,
        singular_values: sv,
        v: vm,
    }
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Singular values in descending order.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    svd(a).singular_values
}

/// Best rank-`r` approximation in Frobenius norm.
pub fn rank_r_truncation(a: &Matrix, r: usize) -> Result<Matrix> {
    let k = a.rows().min(a.cols());
    if r == 0 || r > k {
        return Err(FedError::InvalidArgument(format!(
            "rank {r} outside 1..={k}"
        )));
    }
    Ok(svd(a).reconstruct(r))
}

/// Squared Frobenius error of the best rank-`r` approximation, `Σ_{i>r} σ_i²`.
pub fn truncation_error_sq(a: &Matrix, r: usize) -> Result<f64> {
    let k = a.rows().min(a.cols());
    if r == 0 || r > k {
        return Err(FedError::InvalidArgument(format!(
            "rank {r} outside 1..={k}"
        )));
    }
    Ok(singular_values(a)[r..].iter().map(|s| s * s).sum())
}

/// Inverse together with the 2-norm condition estimate `σ_max / σ_min`.
///
/// Fails with [`FedError::SingularMatrix`] when `σ_min < singular_tol · σ_max`.
pub fn invert(a: &Matrix, singular_tol: f64) -> Result<(Matrix, f64)> {
    if a.rows() != a.cols() {
        return Err(FedError::DimensionMismatch(format!(
            "cannot invert a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let sv = singular_values(a);
    let smax = sv.first().copied().unwrap_or(0.0);
    let smin = sv.last().copied().unwrap_or(0.0);
    if smax == 0.0 || smin < singular_tol * smax {
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        return Err(FedError::SingularMatrix { condition });
    }
    let inv = gauss_jordan(a).ok_or(FedError::SingularMatrix {
        condition: smax / smin,
    })?;
    Ok((inv, smax / smin))
}

fn gauss_jordan(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let mut work = a.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| work[(x, col)].abs().total_cmp(&work[(y, col)].abs()))?;
        if work[(pivot, col)] == 0.0 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                work.data.swap(pivot * n + j, col * n + j);
                inv.data.swap(pivot * n + j, col * n + j);
            }
        }
        let p = work[(col, col)];
        for j in 0..n {
            work[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = work[(row, col)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work[(row, j)] -= factor * work[(col, j)];
                inv[(row, j)] -= factor * inv[(col, j)];
            }
        }
    }
    Some(inv)
}

/// Multi-index `s ∈ Z₊^d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `|s| = Σ s_i`.
    pub fn order(&self) -> usize {
        self.0.iter().sum()
    }

    /// `s! = Π s_i!`, or `None` on overflow.
    pub fn factorial(&self) -> Option<u128> {
        self.0.iter().try_fold(1u128, |acc, &k| {
            (1..=k as u128).try_fold(acc, |a, j| a.checked_mul(j))
        })
    }

    pub fn factorial_f64(&self) -> f64 {
        self.0
            .iter()
            .map(|&k| (1..=k).map(|j| j as f64).product::<f64>())
            .product()
    }

    /// Monomial `x^s = Π x_i^{s_i}`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .map(|(&k, &xi)| xi.powi(k as i32))
            .product()
    }
}

/// Binomial coefficient, `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    u64::try_from(acc).ok()
}

/// All multi-indices of dimension `d` with total degree at most `l`, in
/// graded-lexicographic order: by degree, then by descending leading entry.
pub fn enumerate_multi_indices(d: usize, l: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for degree in 0..=l {
        let mut current = vec![0; d];
        compositions(d, degree, 0, &mut current, &mut out);
    }
    out
}

fn compositions(d: usize, remaining: usize, pos: usize, current: &mut [usize], out: &mut Vec<MultiIndex>) {
    if d == 0 {
        return;
    }
    if pos == d - 1 {
        current[pos] = remaining;
        out.push(MultiIndex(current.to_vec()));
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k;
        compositions(d, remaining - k, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// Central-difference stencil `(offset, weight)` for the `k`-th derivative,
/// second-order accurate, weights to be divided by `h^k`.
fn stencil(k: usize) -> &'static [(i32, f64)] {
    match k {
        0 => &[(0, 1.0)],
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        4 => &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
        _ => unreachable!(),
    }
}

/// Central finite-difference estimate of `∇ˢ f(x)` for `|s| ≤ 4`, built as
/// the tensor product of one-dimensional stencils.
pub fn finite_diff_partial(f: impl Fn(&[f64]) -> f64, x: &[f64], s: &MultiIndex, h: f64) -> Result<f64> {
    if s.dim() != x.len() {
        return Err(FedError::DimensionMismatch(format!(
            "multi-index of dim {} at a point of dim {}",
            s.dim(),
            x.len()
        )));
    }
    if s.order() > 4 {
        return Err(FedError::Unsupported(format!(
            "finite differences of order {} (max 4)",
            s.order()
        )));
    }
    if !(h > 0.0) {
        return Err(FedError::InvalidArgument("step must be positive".into()));
    }
    let stencils: Vec<&[(i32, f64)]> = s.0.iter().map(|&k| stencil(k)).collect();
    let mut idx = vec![0usize; x.len()];
    let mut point = x.to_vec();
    let mut total = 0.0;
    loop {
        let mut weight = 1.0;
        for (dim, st) in stencils.iter().enumerate() {
            let (off, w) = st[idx[dim]];
            point[dim] = x[dim] + off as f64 * h;
            weight *= w;
        }
        total += weight * f(&point);
        // odometer increment
        let mut dim = 0;
        loop {
            if dim == idx.len() {
                return Ok(total / h.powi(s.order() as i32));
            }
            idx[dim] += 1;
            if idx[dim] < stencils[dim].len() {
                break;
            }
            idx[dim] = 0;
            dim += 1;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn dist1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Pairwise (tree) summation of equally sized vectors in index order.
pub fn pairwise_sum(vectors: &[Vec<f64>], len: usize) -> Vec<f64> {
    match vectors.len() {
        0 => vec![0.0; len],
        1 => vectors[0].clone(),
        n => {
            let (lo, hi) = vectors.split_at(n / 2);
            let a = pairwise_sum(lo, len);
            let b = pairwise_sum(hi, len);
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
    }
}
