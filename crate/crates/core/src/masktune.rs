//! Least-squares tuning of the retained mask entries of one dense.
//!
//! With `d = m ∘ m̂ − 1`, the reconstruction residual over a token-major
//! batch `X` (`T × q`) is `Σ_t ‖W·Diag(x_t)·d‖² = dᵀ·G·d` where
//! `G = (WᵀW) ∘ (XᵀX)`. The direct path restricts `G` to the retained set
//! `R` and solves `(G_RR + εI)·m̂_R = (G·1)_R` by Cholesky; the iterative path
//! runs damped LSMR on the stacked `T·p × |R|` system without forming it.

use serde::{Deserialize, Serialize};

use crate::linalg::{
    cholesky_factor, cholesky_solve, lsmr, sample_variance, LinalgError, LinearOperator, Matrix,
    Vector,
};
use crate::model::kernels::gemm;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Direct,
    Iterative,
}

/// One tuning instance. `inputs` feed the pruned dense; `targets`, when set,
/// are the inputs of the reference dense (`W·targets_t` is reconstructed).
#[derive(Debug, Clone, Copy)]
pub struct TuneProblem<'a> {
    pub weight: &'a Matrix,
    /// `T × q`, one row per token.
    pub inputs: &'a Matrix,
    pub targets: Option<&'a Matrix>,
    pub mask: &'a [bool],
    pub epsilon: f64,
    pub solver: Solver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    /// Zero at pruned positions.
    pub tuned: Vector,
    /// RMS over all `p × T` output entries.
    pub residual: f64,
    /// Population variance of the retained entries.
    pub variance: f64,
    pub solver_iterations: usize,
    pub solver: Solver,
    /// The direct factorization failed and the iterative path was used.
    pub fell_back: bool,
}

pub const ITERATIVE_TOL: f64 = 1e-12;

/// Precomputed quadratic form of one dense over fixed inputs, reused across
/// many masks.
#[derive(Debug, Clone)]
pub struct TuneSystem<'a> {
    weight: &'a Matrix,
    inputs: &'a Matrix,
    targets: Option<&'a Matrix>,
    /// `(WᵀW) ∘ (X̂ᵀX̂)`
    g: Matrix,
    /// Right-hand side before restriction: `((WᵀW) ∘ (X̂ᵀX))·1`.
    rhs: Vec<f64>,
    /// `Σ_t ‖W·x_t‖²` of the targets.
    target_energy: f64,
    epsilon: f64,
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("finite products of finite entries")
}

/// `Xᵀ·Y` for two `T × q` matrices.
fn cross_gram(x: &Matrix, y: &Matrix) -> Matrix {
    let (t, q) = (x.rows(), x.cols());
    let mut out = vec![0.0; q * q];
    gemm(q, t, q, x.data(), true, y.data(), false, &mut out, false);
    Matrix::new(q, q, out).expect("finite inputs")
}

impl<'a> TuneSystem<'a> {
    pub fn new(
        weight: &'a Matrix,
        inputs: &'a Matrix,
        targets: Option<&'a Matrix>,
        epsilon: f64,
    ) -> Result<Self> {
        let q = weight.cols();
        if inputs.cols() != q {
            return Err(LinalgError::DimensionMismatch {
                op: "tune_mask",
                expected: (q).to_string(),
                found: (inputs.cols()).to_string(),
            }
            .into());
        }
        if let Some(t) = targets {
            if t.rows() != inputs.rows() || t.cols() != q {
                return Err(LinalgError::DimensionMismatch {
                    op: "tune_mask targets",
                    expected: (inputs.rows()).to_string(),
                    found: (t.rows()).to_string(),
                }
                .into());
            }
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        let s = weight.gram();
        let g = hadamard(&s, &cross_gram(inputs, inputs));
        let (rhs, target_energy) = match targets {
            None => {
                let rhs: Vec<f64> = (0..q).map(|i| g.row(i).iter().sum()).collect();
                let e = rhs.iter().sum();
                (rhs, e)
            }
            Some(t) => {
                let cross = hadamard(&s, &cross_gram(inputs, t));
                let rhs = (0..q).map(|i| cross.row(i).iter().sum()).collect();
                let tt = hadamard(&s, &cross_gram(t, t));
                (rhs, tt.data().iter().sum())
            }
        };
        Ok(Self {
            weight,
            inputs,
            targets,
            g,
            rhs,
            target_energy,
            epsilon,
        })
    }

    pub fn from_problem(p: &TuneProblem<'a>) -> Result<Self> {
        Self::new(p.weight, p.inputs, p.targets, p.epsilon)
    }

    pub fn q(&self) -> usize {
        self.weight.cols()
    }

    /// `Σ_t ‖W·Diag(x̂_t)·z − W·x_t‖²` for a full-length `z = m ∘ m̂`.
    pub fn residual_squared(&self, z: &[f64]) -> f64 {
        if self.targets.is_none() {
            // dᵀGd with d = z − 1 avoids cancellation.
            let d: Vec<f64> = z.iter().map(|v| v - 1.0).collect();
            let gd = self.g.matvec(&d).expect("length q");
            return d.iter().zip(gd.iter()).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        }
        let gz = self.g.matvec(z).expect("length q");
        let quad: f64 = z.iter().zip(gz.iter()).map(|(a, b)| a * b).sum();
        let lin: f64 = z.iter().zip(&self.rhs).map(|(a, b)| a * b).sum();
        (quad - 2.0 * lin + self.target_energy).max(0.0)
    }

    /// Regularized objective used for optimality checks.
    pub fn objective(&self, z: &[f64]) -> f64 {
        self.residual_squared(z) + self.epsilon * z.iter().map(|v| v * v).sum::<f64>()
    }

    /// Root mean squared residual per output entry.
    pub fn rms(&self, z: &[f64]) -> f64 {
        let n = (self.weight.rows() * self.inputs.rows()).max(1) as f64;
        (self.residual_squared(z) / n).sqrt()
    }

    fn direct(&self, retained: &[usize]) -> std::result::Result<Vec<f64>, LinalgError> {
        let r = retained.len();
        let mut m = Matrix::zeros(r, r);
        for (a, &i) in retained.iter().enumerate() {
            for (b, &j) in retained.iter().enumerate() {
                m.set(a, b, self.g.get(i, j));
            }
        }
        m.add_diagonal(self.epsilon);
        let rhs: Vec<f64> = retained.iter().map(|&i| self.rhs[i]).collect();
        let l = cholesky_factor(&m)?;
        Ok(cholesky_solve(&l, &rhs)?.into_inner())
    }

    fn iterative(&self, retained: &[usize]) -> std::result::Result<(Vec<f64>, usize), LinalgError> {
        let op = StackedOperator {
            weight: self.weight,
            inputs: self.inputs,
            retained,
        };
        let y = stacked_target(self.weight, self.targets.unwrap_or(self.inputs));
        let max_iter = 20 * retained.len() + 50;
        let sol = lsmr(&op, &y, self.epsilon, ITERATIVE_TOL, max_iter)?;
        Ok((sol.x.into_inner(), sol.iterations))
    }

    /// Tunes the mask; unknown `solver` failures fall back to the other path.
    pub fn solve(&self, mask: &[bool], solver: Solver) -> Result<TuneResult> {
        let q = self.q();
        if mask.len() != q {
            return Err(LinalgError::DimensionMismatch {
                op: "tune_mask mask",
                expected: (q).to_string(),
                found: (mask.len()).to_string(),
            }
            .into());
        }
        let retained: Vec<usize> = (0..q).filter(|&j| mask[j]).collect();
        if retained.is_empty() {
            return Err(Error::Config("tune_mask needs at least one retained input".into()));
        }
        let mut tuned = vec![0.0; q];
        if retained.len() == q && self.targets.is_none() {
            // Nothing pruned: m̂ = 1 reproduces the target exactly.
            tuned.iter_mut().for_each(|v| *v = 1.0);
            return Ok(TuneResult {
                tuned: Vector(tuned),
                residual: 0.0,
                variance: 0.0,
                solver_iterations: 0,
                solver,
                fell_back: false,
            });
        }
        let (values, iterations, used, fell_back) = match solver {
            Solver::Direct => match self.direct(&retained) {
                Ok(x) => (x, 0, Solver::Direct, false),
                Err(direct_err) => {
                    let (x, it) = self.iterative(&retained).map_err(|e| Error::Solver {
                        dense: format!("direct: {direct_err}; iterative"),
                        source: e,
                    })?;
                    (x, it, Solver::Iterative, true)
                }
            },
            Solver::Iterative => {
                let (x, it) = self.iterative(&retained).map_err(|e| Error::Solver {
                    dense: "iterative".into(),
                    source: e,
                })?;
                (x, it, Solver::Iterative, false)
            }
        };
        for (&j, v) in retained.iter().zip(&values) {
            tuned[j] = *v;
        }
        let variance = sample_variance(&values)?;
        Ok(TuneResult {
            residual: self.rms(&tuned),
            tuned: Vector(tuned),
            variance,
            solver_iterations: iterations,
            solver: used,
            fell_back,
        })
    }
}

/// Rows `(t, i)` of `W·Diag(x_t)` restricted to retained columns.
struct StackedOperator<'a> {
    weight: &'a Matrix,
    inputs: &'a Matrix,
    retained: &'a [usize],
}

impl LinearOperator for StackedOperator<'_> {
    fn rows(&self) -> usize {
        self.inputs.rows() * self.weight.rows()
    }

    fn cols(&self) -> usize {
        self.retained.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (t_count, q, p) = (self.inputs.rows(), self.weight.cols(), self.weight.rows());
        // Z (T × q) = X ∘ (1 zᵀ), then out (T × p) = Z·Wᵀ.
        let mut z = vec![0.0; t_count * q];
        for t in 0..t_count {
            let xr = self.inputs.row(t);
            for (&j, v) in self.retained.iter().zip(x) {
                z[t * q + j] = xr[j] * v;
            }
        }
        gemm(t_count, q, p, &z, false, self.weight.data(), true, out, false);
    }

    fn apply_transpose(&self, y: &[f64], out: &mut [f64]) {
        let (t_count, q, p) = (self.inputs.rows(), self.weight.cols(), self.weight.rows());
        // (Y·W) ∘ X summed over tokens.
        let mut yw = vec![0.0; t_count * q];
        gemm(t_count, p, q, y, false, self.weight.data(), false, &mut yw, false);
        out.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..t_count {
            let xr = self.inputs.row(t);
            for (o, &j) in out.iter_mut().zip(self.retained) {
                *o += yw[t * q + j] * xr[j];
            }
        }
    }
}

/// Stacked target `W·x_t` for every token (token-major, `T·p`).
fn stacked_target(weight: &Matrix, x: &Matrix) -> Vec<f64> {
    let (t, q, p) = (x.rows(), x.cols(), weight.rows());
    let mut y = vec![0.0; t * p];
    gemm(t, q, p, x.data(), false, weight.data(), true, &mut y, false);
    y
}

pub fn tune_mask(problem: &TuneProblem<'_>) -> Result<TuneResult> {
    TuneSystem::from_problem(problem)?.solve(problem.mask, problem.solver)
}

/// Population variance of the retained entries of `tuned`.
pub fn mask_variance(tuned: &[f64], mask: &[bool]) -> Result<f64> {
    let kept: Vec<f64> = tuned
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if kept.is_empty() {
        return Err(Error::Config("mask has no retained entries".into()));
    }
    Ok(sample_variance(&kept)?)
}

/// RMS of `W·Diag(m̂)·(m ∘ x_t) − W·x_t` over all `p × T` entries, computed
/// token by token.
pub fn reconstruction_error(weight: &Matrix, inputs: &Matrix, mask: &[bool], tuned: &[f64]) -> f64 {
    let (t_count, p) = (inputs.rows(), weight.rows());
    let mut sum = 0.0;
    let mut diff = vec![0.0; inputs.cols()];
    for t in 0..t_count {
        let x = inputs.row(t);
        for j in 0..x.len() {
            let z = if mask[j] { tuned[j] } else { 0.0 };
            diff[j] = x[j] * (z - 1.0);
        }
        let r = weight.matvec(&diff).expect("shapes agree");
        sum += r.iter().map(|v| v * v).sum::<f64>();
    }
    (sum / (p * t_count).max(1) as f64).sqrt()
}
