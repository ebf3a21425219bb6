//! Dense linear algebra on `f64` matrices.
//!
//! Thin layer over `nalgebra` that fixes the conventions used everywhere else:
//! singular values sorted descending, `sigma_k` is 1-based and zero past the
//! dimension, solves never form an inverse, and anything with a condition
//! estimate above [`CONDITION_CEILING`] counts as singular.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative tolerance for numerical rank.
pub const RANK_TOL: f64 = 1e-10;
/// Condition estimates above this are treated as singular.
pub const CONDITION_CEILING: f64 = 1e12;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite {
                    what: what.to_string(),
                    row: r,
                    col: c,
                });
            }
        }
    }
    Ok(())
}

/// Row-major JSON form: `{"rows": n, "cols": m, "data": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatrixJson {
    fn from(m: &Matrix) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl TryFrom<MatrixJson> for Matrix {
    type Error = Error;

    fn try_from(j: MatrixJson) -> Result<Matrix> {
        if j.rows == 0 || j.cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix must have positive shape, got {}x{}",
                j.rows, j.cols
            )));
        }
        if j.data.len() != j.rows * j.cols {
            return Err(Error::dims(
                "matrix json",
                format!("{}x{} needs {} entries, got {}", j.rows, j.cols, j.rows * j.cols, j.data.len()),
            ));
        }
        let m = Matrix::from_row_slice(j.rows, j.cols, &j.data);
        check_finite(&m, "matrix json")?;
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    /// σ_k with 1-based k; zero beyond the stored count.
    pub fn sigma(&self, k: usize) -> f64 {
        if k == 0 {
            return f64::INFINITY;
        }
        self.singular_values.get(k - 1).copied().unwrap_or(0.0)
    }

    pub fn reconstruct(&self) -> Matrix {
        let s = Matrix::from_diagonal(&Vector::from_vec(self.singular_values.clone()));
        &self.u * s * self.v.transpose()
    }

    /// Sum of the leading `r` rank-one terms.
    pub fn truncated(&self, r: usize) -> Matrix {
        let k = r.min(self.singular_values.len());
        let mut out = Matrix::zeros(self.u.nrows(), self.v.nrows());
        for i in 0..k {
            let s = self.singular_values[i];
            if s == 0.0 {
                continue;
            }
            out += s * self.u.column(i) * self.v.column(i).transpose();
        }
        out
    }

    pub fn numerical_rank(&self, tol_factor: f64) -> usize {
        let thr = rank_threshold(&self.singular_values, self.u.nrows(), self.v.nrows(), tol_factor);
        self.singular_values.iter().filter(|&&s| s > thr).count()
    }
}

fn rank_threshold(sv: &[f64], rows: usize, cols: usize, tol_factor: f64) -> f64 {
    let s1 = sv.first().copied().unwrap_or(0.0);
    tol_factor * s1 * rows.max(cols) as f64
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    svd_named(m, "matrix")
}

pub fn svd_named(m: &Matrix, name: &str) -> Result<SvdResult> {
    check_finite(m, name)?;
    if m.nrows() < m.ncols() {
        let t = jacobi_svd(&m.transpose()).ok_or_else(|| non_convergence(m, name))?;
        return Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    jacobi_svd(m).ok_or_else(|| non_convergence(m, name))
}

fn non_convergence(m: &Matrix, name: &str) -> Error {
    Error::SvdNonConvergence {
        name: name.to_string(),
        condition: lu_condition_estimate(m),
    }
}

/// One-sided Jacobi for `rows >= cols`. Accurate on rank-deficient inputs,
/// where the bidiagonal routines can lose the leading singular values.
fn jacobi_svd(m: &Matrix) -> Option<SvdResult> {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut v = Matrix::identity(cols, cols);
    let mut converged = cols < 2;
    for _ in 0..80 {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1f64.hypot(zeta));
                if t == 0.0 {
                    continue;
                }
                rotated = true;
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return None;
    }

    let norms: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut u = Matrix::zeros(rows, cols);
    let mut sv = Matrix::zeros(cols, cols);
    let mut s = Vec::with_capacity(cols);
    let floor = norms.iter().fold(0.0f64, |acc, &x| acc.max(x)) * f64::EPSILON * rows as f64;
    let mut filled = Vec::with_capacity(cols);
    for (dst, &src) in order.iter().enumerate() {
        sv.set_column(dst, &v.column(src));
        s.push(norms[src]);
        if norms[src] > floor {
            u.set_column(dst, &(a.column(src) / norms[src]));
            filled.push(dst);
        }
    }
    // Complete the left basis where the singular value vanished.
    let mut e = 0;
    for dst in 0..cols {
        if filled.contains(&dst) {
            continue;
        }
        while e < rows {
            let mut x = Vector::zeros(rows);
            x[e] = 1.0;
            e += 1;
            for &j in &filled {
                let proj = u.column(j).dot(&x);
                x -= u.column(j) * proj;
            }
            let n = x.norm();
            if n > 1e-8 {
                u.set_column(dst, &(x / n));
                filled.push(dst);
                break;
            }
        }
    }
    Some(SvdResult {
        u,
        singular_values: s,
        v: sv,
    })
}

fn rotate(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

fn lu_condition_estimate(m: &Matrix) -> f64 {
    if !m.is_square() {
        return f64::NAN;
    }
    let lu = m.clone().lu();
    match lu.solve(&Matrix::identity(m.nrows(), m.ncols())) {
        Some(inv) => m.norm() * inv.norm(),
        None => f64::INFINITY,
    }
}

pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(m)?.singular_values)
}

/// α_r(m): best rank-`r` approximation via truncated SVD.
pub fn best_rank_approx(m: &Matrix, r: usize) -> Result<Matrix> {
    if r >= m.nrows().min(m.ncols()) {
        return Ok(m.clone());
    }
    Ok(svd(m)?.truncated(r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub numerical_rank: usize,
    pub threshold: f64,
    pub singular_values: Vec<f64>,
}

pub fn numerical_rank(m: &Matrix, tol_factor: f64) -> Result<RankReport> {
    if !(tol_factor > 0.0) {
        return Err(Error::InvalidArgument(format!("tol_factor must be positive, got {tol_factor}")));
    }
    let sv = singular_values(m)?;
    let threshold = rank_threshold(&sv, m.nrows(), m.ncols(), tol_factor);
    let numerical_rank = sv.iter().filter(|&&s| s > threshold).count();
    Ok(RankReport {
        numerical_rank,
        threshold,
        singular_values: sv,
    })
}

/// Rank with the default tolerance.
pub fn rank(m: &Matrix) -> Result<usize> {
    Ok(numerical_rank(m, RANK_TOL)?.numerical_rank)
}

/// `ws[L-1] * ... * ws[0]`; identity of size `dim` when empty.
pub fn chain_product(ws: &[Matrix], dim: usize) -> Result<Matrix> {
    let mut out = Matrix::identity(dim, dim);
    for (i, w) in ws.iter().enumerate() {
        if w.nrows() != dim || w.ncols() != dim {
            return Err(Error::dims(
                "chain_product",
                format!("factor {} is {}x{}, expected {dim}x{dim}", i + 1, w.nrows(), w.ncols()),
            ));
        }
        out = w * out;
    }
    Ok(out)
}

/// σ₁/σ_n for square input; infinite when σ_n is zero.
pub fn condition_number(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::dims("condition_number", format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    let sv = singular_values(m)?;
    let smax = sv[0];
    let smin = *sv.last().unwrap();
    if smax == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(if smin == 0.0 { f64::INFINITY } else { smax / smin })
}

pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    solve_named(a, b, "matrix")
}

/// Solves `a X = b`; `name` labels `a` in the singularity error.
pub fn solve_named(a: &Matrix, b: &Matrix, name: &str) -> Result<Matrix> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::dims(
            "solve",
            format!("a is {}x{}, b is {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        ));
    }
    let condition = condition_number(a)?;
    if !(condition <= CONDITION_CEILING) {
        return Err(Error::NonSingularityViolation {
            name: name.to_string(),
            condition,
            ceiling: CONDITION_CEILING,
        });
    }
    a.clone().lu().solve(b).ok_or(Error::NonSingularityViolation {
        name: name.to_string(),
        condition,
        ceiling: CONDITION_CEILING,
    })
}

/// LU factors of a matrix that already passed the condition check, for repeated solves.
pub struct Factorized {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Factorized {
    pub fn new(a: &Matrix, name: &str) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims("factorize", format!("{}x{} is not square", a.nrows(), a.ncols())));
        }
        let condition = condition_number(a)?;
        if !(condition <= CONDITION_CEILING) {
            return Err(Error::NonSingularityViolation {
                name: name.to_string(),
                condition,
                ceiling: CONDITION_CEILING,
            });
        }
        Ok(Factorized { lu: a.clone().lu() })
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.lu.solve(b).expect("factor passed the condition check")
    }
}

/// Solves `X a = b`.
pub fn solve_right_named(b: &Matrix, a: &Matrix, name: &str) -> Result<Matrix> {
    if !a.is_square() || a.ncols() != b.ncols() {
        return Err(Error::dims(
            "solve_right",
            format!("b is {}x{}, a is {}x{}", b.nrows(), b.ncols(), a.nrows(), a.ncols()),
        ));
    }
    Ok(solve_named(&a.transpose(), &b.transpose(), name)?.transpose())
}

pub fn spectral_norm(m: &Matrix) -> f64 {
    singular_values(m).map(|s| s[0]).unwrap_or(f64::NAN)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.norm()
}

/// k-th largest singular value, 1-based; 0 past the dimension.
pub fn sigma_k(m: &Matrix, k: usize) -> f64 {
    if k == 0 || k > m.nrows().min(m.ncols()) {
        return 0.0;
    }
    singular_values(m).map(|s| s[k - 1]).unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    XavierUniform,
    StandardGaussian,
}

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scheme: InitScheme, rng: &mut R) -> Matrix {
    match scheme {
        InitScheme::XavierUniform => {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
        }
        InitScheme::StandardGaussian => Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal)),
    }
}

/// Square `dim`×`dim` matrix drawn from its own stream.
pub fn random_matrix_seeded(dim: usize, scheme: InitScheme, seed: u64) -> Matrix {
    random_matrix(dim, dim, scheme, &mut seeded_rng(seed))
}

/// Uniform on `[-bound, bound]`, the usual bias initializer with bound 1/sqrt(fan_in).
pub fn uniform_vector<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Vector {
    if bound == 0.0 {
        return Vector::zeros(len);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Vector::from_fn(len, |_, _| dist.sample(rng))
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    random_matrix(rows, cols, InitScheme::StandardGaussian, rng)
}

/// `n` standard Gaussian columns, each redrawn until its norm is at most `radius`.
pub fn gaussian_in_ball<R: Rng + ?Sized>(dim: usize, n: usize, radius: f64, rng: &mut R) -> Matrix {
    let mut out = Matrix::zeros(dim, n);
    for j in 0..n {
        loop {
            let x: Vector = Vector::from_fn(dim, |_, _| rng.sample(StandardNormal));
            if x.norm() <= radius {
                out.set_column(j, &x);
                break;
            }
        }
    }
    out
}

/// Adds `b` to every column of `m`.
pub fn add_bias(m: &Matrix, b: &Vector) -> Matrix {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col += b;
    }
    out
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// Softmax of each column, shifted by the column max.
pub fn softmax_columns(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mx = col.max();
        col.apply(|v| *v = (*v - mx).exp());
        let s = col.sum();
        col /= s;
    }
    out
}

/// Mean over columns of ‖column‖² / rows.
pub fn per_coordinate_mse(a: &Matrix, b: &Matrix) -> f64 {
    let d = a - b;
    d.norm_squared() / (d.nrows() * d.ncols()) as f64
}
