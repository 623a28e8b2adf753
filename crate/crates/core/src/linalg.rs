//! Dense numerical kernels shared by every other module.
//!
//! Everything here is single-threaded, allocation-explicit and deterministic:
//! the same inputs always produce bit-identical outputs.

use std::fmt;
use std::ops::{Deref, DerefMut};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("singular triangular factor (zero diagonal at {index})")]
    Singular { index: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                op: "Matrix::new",
                expected: format!("{} values", rows * cols),
                found: format!("{} values", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn diagonal(&self) -> Vector {
        Vector((0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect())
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(mismatch("matvec", self.cols, x.len()));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        Ok(Vector(out))
    }

    pub(crate) fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    /// `selfᵀ · y`.
    pub fn tr_matvec(&self, y: &[f64]) -> Result<Vector> {
        if y.len() != self.rows {
            return Err(mismatch("tr_matvec", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        self.tr_matvec_into(y, &mut out);
        Ok(Vector(out))
    }

    pub(crate) fn tr_matvec_into(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
    }

    /// `selfᵀ · self`, exactly symmetric.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let gi = &mut g.data[i * n..(i + 1) * n];
                for j in i..n {
                    gi[j] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    /// Largest `|m_ij − m_ji|` relative to the largest entry.
    pub fn relative_asymmetry(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    /// `(M + Mᵀ)/2`.
    pub fn symmetrized(&self) -> Matrix {
        let n = self.rows;
        let mut s = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                s.set(i, j, v);
                s.set(j, i, v);
            }
        }
        s
    }

    pub fn add_diagonal(&mut self, shift: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += shift;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Gershgorin upper bound on the spectral radius.
    pub fn gershgorin_bound(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

/// Owned vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Self(data))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

fn mismatch(op: &'static str, expected: usize, found: usize) -> LinalgError {
    LinalgError::DimensionMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard product with a fixed accumulation order (row-major, sequential in
/// the inner dimension).
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            expected: format!("{} rows in rhs", a.cols),
            found: format!("{}", b.rows),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

const SYMMETRY_TOL: f64 = 1e-9;

/// Lower-triangular `L` with `L·Lᵀ = m`.
///
/// The input is checked for symmetry (1e-9 relative) and symmetrized before
/// factorization.
pub fn cholesky_factor(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(mismatch("cholesky_factor", m.rows, m.cols));
    }
    let asym = m.relative_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    let mut l = m.symmetrized();
    factor_in_place(&mut l)?;
    Ok(l)
}

/// In-place Cholesky of a symmetric matrix; reads the lower triangle and
/// zeroes the strict upper triangle.
fn factor_in_place(a: &mut Matrix) -> Result<()> {
    let n = a.rows;
    for j in 0..n {
        let rowj = &mut a.data[j * n..(j + 1) * n];
        let d = rowj[j] - dot(&rowj[..j], &rowj[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        rowj[j] = ljj;
        for v in rowj[(j + 1)..].iter_mut() {
            *v = 0.0;
        }
        for i in (j + 1)..n {
            let (upper, lower) = a.data.split_at_mut(i * n);
            let rowj = &upper[j * n..j * n + j];
            let rowi = &mut lower[..n];
            let s = rowi[j] - dot(&rowi[..j], rowj);
            rowi[j] = s / ljj;
        }
    }
    Ok(())
}

/// Solves `(L·Lᵀ)x = rhs` by forward and back substitution.
pub fn cholesky_solve(l: &Matrix, rhs: &[f64]) -> Result<Vector> {
    if !l.is_square() || l.rows != rhs.len() {
        return Err(mismatch("cholesky_solve", l.rows, rhs.len()));
    }
    let mut x = rhs.to_vec();
    cholesky_solve_in_place(l, &mut x)?;
    Ok(Vector(x))
}

pub(crate) fn cholesky_solve_in_place(l: &Matrix, x: &mut [f64]) -> Result<()> {
    let n = l.rows;
    for i in 0..n {
        let lii = l.get(i, i);
        if lii == 0.0 {
            return Err(LinalgError::Singular { index: i });
        }
        let s = x[i] - dot(&l.row(i)[..i], &x[..i]);
        x[i] = s / lii;
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    Ok(())
}

/// Which end of the spectrum to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy)]
pub struct EigOptions {
    pub tol: f64,
    /// `None` means `10 · dim`.
    pub max_iter: Option<usize>,
}

impl Default for EigOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    pub value: f64,
    /// Unit 2-norm; sign fixed so the largest-magnitude component is positive.
    pub vector: Vector,
    pub iterations: usize,
    pub residual: f64,
}

/// Extreme eigenpair of a symmetric positive definite matrix.
///
/// Starts from the normalized all-ones vector. `Max` runs power iteration,
/// `Min` runs inverse iteration through the Cholesky factor. When the plain
/// iteration converges slowly, a Rayleigh shift is applied whose
/// definiteness is verified by a trial factorization (`σI − M` for max,
/// `M − σI` for min), so the iteration provably targets the requested end.
/// Converged when `‖Mv − λv‖₂ ≤ tol · λ_max`.
pub fn extreme_eigpair(m: &Matrix, which: Extreme, opts: EigOptions) -> Result<EigPair> {
    extreme_eigpair_deflated(m, which, &[], opts)
}

/// Same as [`extreme_eigpair`] restricted to the orthogonal complement of
/// `deflate` (orthonormal vectors). Used to estimate spectral gaps.
pub fn extreme_eigpair_deflated(
    m: &Matrix,
    which: Extreme,
    deflate: &[&[f64]],
    opts: EigOptions,
) -> Result<EigPair> {
    let n = m.rows;
    if !m.is_square() {
        return Err(mismatch("extreme_eigpair", m.rows, m.cols));
    }
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    let asym = m.relative_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    let m = m.symmetrized();
    let max_iter = opts.max_iter.unwrap_or(10 * n).max(1);
    // λ_max ≥ every diagonal entry, so this never loosens the tolerance.
    let scale = (0..n).map(|i| m.get(i, i)).fold(0.0, f64::max);
    let target = opts.tol * scale;

    let mut v = start_vector(n, deflate);
    let mut mv = vec![0.0; n];
    let mut work = vec![0.0; n];

    // Rayleigh quotient and residual of the current unit vector.
    let rayleigh = |v: &[f64], mv: &mut [f64]| -> (f64, f64) {
        m.matvec_into(v, mv);
        let theta = dot(v, mv);
        let r = mv
            .iter()
            .zip(v)
            .map(|(a, b)| (a - theta * b).powi(2))
            .sum::<f64>()
            .sqrt();
        (theta, r)
    };

    let (mut theta, mut resid) = rayleigh(&v, &mut mv);
    if resid <= target {
        return Ok(finish(theta, v, 0, resid));
    }

    // Shift state: `None` = unshifted power iteration (max) or unshifted
    // factor of M (min).
    let mut factor: Option<Matrix> = match which {
        Extreme::Max => None,
        Extreme::Min => Some(cholesky_factor(&m)?),
    };
    let mut shift = 0.0_f64;
    let mut resid_at_shift = resid;
    let mut since_shift = 0usize;

    for it in 1..=max_iter {
        match &factor {
            None => work.copy_from_slice(&mv),
            Some(l) => {
                work.copy_from_slice(&v);
                cholesky_solve_in_place(l, &mut work)?;
            }
        }
        project_out(&mut work, deflate);
        let nw = norm(&work);
        if !(nw > 0.0) || !nw.is_finite() {
            // Exact invariant subspace hit (or breakdown); keep previous v.
            return if resid <= target {
                Ok(finish(theta, v, it, resid))
            } else {
                Err(LinalgError::NoConvergence {
                    iterations: it,
                    residual: resid,
                })
            };
        }
        for (vi, wi) in v.iter_mut().zip(&work) {
            *vi = wi / nw;
        }
        let prev = resid;
        let (t, r) = rayleigh(&v, &mut mv);
        theta = t;
        resid = r;
        if resid <= target {
            return Ok(finish(theta, v, it, resid));
        }
        since_shift += 1;

        // Re-shift when convergence is slow or the residual has dropped
        // enough to tighten the current shift.
        let slow = since_shift >= 2 && resid > 0.3 * prev;
        let tightened = since_shift >= 1 && resid <= 1e-2 * resid_at_shift;
        if slow || tightened {
            if let Some((l, s)) = try_shift(&m, which, theta, resid, shift, factor.is_some()) {
                factor = Some(l);
                shift = s;
            }
            resid_at_shift = resid;
            since_shift = 0;
        }
    }
    Err(LinalgError::NoConvergence {
        iterations: max_iter,
        residual: resid,
    })
}

/// Attempts a tighter definiteness-safe shift around the Rayleigh quotient.
fn try_shift(
    m: &Matrix,
    which: Extreme,
    theta: f64,
    resid: f64,
    current: f64,
    have_safe: bool,
) -> Option<(Matrix, f64)> {
    let n = m.rows;
    let mut offset = resid.max(theta.abs() * 1e-14);
    for _ in 0..48 {
        let sigma = match which {
            Extreme::Max => theta + offset,
            Extreme::Min => theta - offset,
        };
        // Only accept shifts that move toward the spectrum end.
        let improves = match which {
            Extreme::Max => !have_safe || sigma < current,
            Extreme::Min => sigma > current,
        };
        if !improves {
            return None;
        }
        let mut a = m.clone();
        match which {
            Extreme::Max => {
                a.scale(-1.0);
                a.add_diagonal(sigma);
            }
            Extreme::Min => a.add_diagonal(-sigma),
        }
        if factor_in_place(&mut a).is_ok() {
            // Reject near-singular factors whose solves would overflow.
            let min_pivot = (0..n).map(|i| a.get(i, i)).fold(f64::INFINITY, f64::min);
            if min_pivot > 0.0 && min_pivot.is_finite() {
                return Some((a, sigma));
            }
        }
        offset *= 2.0;
    }
    None
}

fn start_vector(n: usize, deflate: &[&[f64]]) -> Vec<f64> {
    let mut v = vec![1.0; n];
    project_out(&mut v, deflate);
    let mut k = 0;
    while norm(&v) < 1e-8 && k < n {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[k] = 1.0;
        project_out(&mut v, deflate);
        k += 1;
    }
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

fn project_out(v: &mut [f64], basis: &[&[f64]]) {
    for b in basis {
        let c = dot(v, b);
        for (vi, bi) in v.iter_mut().zip(b.iter()) {
            *vi -= c * bi;
        }
    }
}

fn finish(value: f64, mut v: Vec<f64>, iterations: usize, residual: f64) -> EigPair {
    let (mut best, mut idx) = (0.0_f64, 0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    EigPair {
        value,
        vector: Vector(v),
        iterations,
        residual,
    }
}

/// A linear map usable by the iterative least-squares solver without
/// materializing its matrix.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `out = A·x`
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `out = Aᵀ·y`
    fn apply_transpose(&self, y: &[f64], out: &mut [f64]);
}

impl LinearOperator for Matrix {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.matvec_into(x, out);
    }
    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        self.tr_matvec_into(y, out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub x: Vector,
    pub iterations: usize,
    /// `‖Aᵀ(Ax − y) + damping·x‖₂`, recomputed explicitly.
    pub normal_residual: f64,
}

/// Damped least squares `min ‖Ax − y‖² + damping·‖x‖²` by LSMR with full
/// reorthogonalization of the right Lanczos vectors.
///
/// Converged when `‖Aᵀ(Ax−y) + damping·x‖₂ ≤ tol·‖Aᵀy‖₂`.
pub fn lsq_solve_iterative(
    a: &Matrix,
    y: &[f64],
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vector> {
    if a.rows == 0 {
        return Err(LinalgError::Empty);
    }
    lsmr(a, y, damping, tol, max_iter).map(|s| s.x)
}

pub fn lsmr<A: LinearOperator + ?Sized>(
    a: &A,
    y: &[f64],
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LsqSolution> {
    let (m, n) = (a.rows(), a.cols());
    if y.len() != m {
        return Err(mismatch("lsmr", m, y.len()));
    }
    if let Some(index) = y.iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite { index });
    }
    let damp = damping.max(0.0).sqrt();

    let mut u = y.to_vec();
    let mut beta = norm(&u);
    let mut v = vec![0.0; n];
    let mut x = vec![0.0; n];
    if beta > 0.0 {
        u.iter_mut().for_each(|e| *e /= beta);
    }
    a.apply_transpose(&u, &mut v);
    let mut alpha = norm(&v);
    let aty_norm = alpha * beta;
    if aty_norm == 0.0 {
        return Ok(LsqSolution {
            x: Vector(x),
            iterations: 0,
            normal_residual: 0.0,
        });
    }
    v.iter_mut().for_each(|e| *e /= alpha);
    let mut basis: Vec<Vec<f64>> = vec![v.clone()];

    let mut zetabar = alpha * beta;
    let mut alphabar = alpha;
    let mut rho = 1.0_f64;
    let mut rhobar = 1.0_f64;
    let mut cbar = 1.0_f64;
    let mut sbar = 0.0_f64;
    let mut h = v.clone();
    let mut hbar = vec![0.0; n];
    let mut au = vec![0.0; m];
    let mut atu = vec![0.0; n];

    let target = tol * aty_norm;
    let mut last_true = f64::INFINITY;
    for it in 1..=max_iter {
        a.apply(&v, &mut au);
        for (ui, ai) in u.iter_mut().zip(&au) {
            *ui = ai - alpha * *ui;
        }
        beta = norm(&u);
        if beta > 0.0 {
            u.iter_mut().for_each(|e| *e /= beta);
            a.apply_transpose(&u, &mut atu);
            for (vi, ai) in v.iter_mut().zip(&atu) {
                *vi = ai - beta * *vi;
            }
            for b in &basis {
                let c = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
            alpha = norm(&v);
            if alpha > 0.0 {
                v.iter_mut().for_each(|e| *e /= alpha);
                if basis.len() < n {
                    basis.push(v.clone());
                }
            }
        }

        let (_chat, _shat, alphahat) = sym_ortho(alphabar, damp);
        let rhoold = rho;
        let (c, s, r) = sym_ortho(alphahat, beta);
        rho = r;
        let thetanew = s * alpha;
        alphabar = c * alpha;

        let rhobarold = rhobar;
        let thetabar = sbar * rho;
        let (cb, sb, rb) = sym_ortho(cbar * rho, thetanew);
        cbar = cb;
        sbar = sb;
        rhobar = rb;
        let zeta = cbar * zetabar;
        zetabar = -sbar * zetabar;

        let hscale = thetabar * rho / (rhoold * rhobarold);
        for (hb, hi) in hbar.iter_mut().zip(&h) {
            *hb = hi - hscale * *hb;
        }
        let xscale = zeta / (rho * rhobar);
        for (xi, hb) in x.iter_mut().zip(&hbar) {
            *xi += xscale * hb;
        }
        let hs = thetanew / rho;
        for (hi, vi) in h.iter_mut().zip(&v) {
            *hi = vi - hs * *hi;
        }

        let estimate = zetabar.abs();
        let exhausted = alpha == 0.0 || beta == 0.0;
        if estimate <= target || exhausted || it == max_iter {
            last_true = normal_residual(a, y, &x, damping);
            if last_true <= target {
                return Ok(LsqSolution {
                    x: Vector(x),
                    iterations: it,
                    normal_residual: last_true,
                });
            }
            if exhausted {
                break;
            }
        }
    }
    Err(LinalgError::NoConvergence {
        iterations: max_iter,
        residual: if last_true.is_finite() {
            last_true / aty_norm
        } else {
            f64::NAN
        },
    })
}

/// `‖Aᵀ(Ax − y) + damping·x‖₂`.
pub fn normal_residual<A: LinearOperator + ?Sized>(a: &A, y: &[f64], x: &[f64], damping: f64) -> f64 {
    let mut r = vec![0.0; a.rows()];
    a.apply(x, &mut r);
    for (ri, yi) in r.iter_mut().zip(y) {
        *ri -= yi;
    }
    let mut g = vec![0.0; a.cols()];
    a.apply_transpose(&r, &mut g);
    for (gi, xi) in g.iter_mut().zip(x) {
        *gi += damping * xi;
    }
    norm(&g)
}

fn sym_ortho(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        let c = if a == 0.0 { 0.0 } else { a.signum() };
        (c, 0.0, a.abs())
    } else if a == 0.0 {
        (0.0, b.signum(), b.abs())
    } else if b.abs() > a.abs() {
        let tau = a / b;
        let s = b.signum() / (1.0 + tau * tau).sqrt();
        let c = s * tau;
        (c, s, b / s)
    } else {
        let tau = b / a;
        let c = a.signum() / (1.0 + tau * tau).sqrt();
        let s = c * tau;
        (c, s, a / c)
    }
}

/// Population variance (divide by `len`), computed with Welford's update.
pub fn sample_variance(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(LinalgError::Empty);
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok((m2 / v.len() as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let b = Matrix::from_rows(&[[0.0], [1.0]]);
        let p = matmul(&m, &b).unwrap();
        assert_eq!(p.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &a),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matrix_new_rejects_nan_and_bad_len() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { index: 1 })
        ));
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn cholesky_hand_cases() {
        let l = cholesky_factor(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l, Matrix::from_diag(&[2.0, 3.0]));
        let l = cholesky_factor(&Matrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]])).unwrap();
        assert_eq!(l.get(0, 0), 2.0);
        assert_eq!(l.get(0, 1), 0.0);
        assert_eq!(l.get(1, 0), 1.0);
        assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let m = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 1.0]]);
        assert_eq!(
            cholesky_factor(&m),
            Err(LinalgError::NotPositiveDefinite { pivot: 2 })
        );
        let asym = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]);
        assert!(matches!(
            cholesky_factor(&asym),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn cholesky_solve_cases() {
        let v = [3.0, -1.0, 2.0];
        assert_eq!(cholesky_solve(&Matrix::identity(3), &v).unwrap().0, v);
        let l = Matrix::from_diag(&[2.0, 3.0]);
        assert_eq!(cholesky_solve(&l, &[4.0, 9.0]).unwrap().0, vec![1.0, 1.0]);
        let sing = Matrix::from_diag(&[1.0, 0.0]);
        assert_eq!(
            cholesky_solve(&sing, &[1.0, 1.0]),
            Err(LinalgError::Singular { index: 1 })
        );
    }

    #[test]
    fn eigpair_diagonal() {
        let m = Matrix::from_diag(&[4.0, 1.0]);
        let max = extreme_eigpair(&m, Extreme::Max, EigOptions::default()).unwrap();
        assert!((max.value - 4.0).abs() < 1e-9);
        assert!((max.vector[0] - 1.0).abs() < 1e-9 && max.vector[1].abs() < 1e-9);
        let min = extreme_eigpair(&m, Extreme::Min, EigOptions::default()).unwrap();
        assert!((min.value - 1.0).abs() < 1e-9);
        assert!(min.vector[0].abs() < 1e-9 && (min.vector[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eigpair_reports_non_convergence() {
        // Nearly equal top eigenvalues with one iteration allowed.
        let m = Matrix::from_diag(&[1.0, 1.0 - 1e-9, 0.5]);
        let err = extreme_eigpair(
            &m,
            Extreme::Max,
            EigOptions {
                tol: 1e-14,
                max_iter: Some(1),
            },
        )
        .unwrap_err();
        assert!(matches!(err, LinalgError::NoConvergence { iterations: 1, .. }));
    }

    #[test]
    fn lsq_small_cases() {
        let v = [1.0, -2.0, 0.5];
        let x = lsq_solve_iterative(&Matrix::identity(3), &v, 0.0, 1e-12, 50).unwrap();
        for (a, b) in x.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        let a = Matrix::from_rows(&[[1.0], [1.0]]);
        let x = lsq_solve_iterative(&a, &[1.0, 3.0], 0.0, 1e-12, 10).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn variance_cases() {
        assert_eq!(sample_variance(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(sample_variance(&[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(sample_variance(&[7.0]).unwrap(), 0.0);
        assert_eq!(sample_variance(&[]), Err(LinalgError::Empty));
    }
}
