//! Layer redundancy scores and condition-number neuron importance.

use serde::{Deserialize, Serialize};

use crate::linalg::{
    dot, extreme_eigpair, extreme_eigpair_deflated, EigOptions, EigPair, Extreme, LinalgError,
    Matrix, Vector,
};
use crate::model::{ActivationTrace, DenseLayer};
use crate::{Error, Result};

/// Redundancy of one layer: mean token cosine between its input and output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    /// Original layer index.
    pub index: usize,
    pub redundancy: f64,
    /// `1 − redundancy`, in `[0, 2]`.
    pub importance: f64,
    /// Tokens skipped because either vector had zero norm.
    pub skipped_tokens: usize,
}

/// Scores one layer from its captured input and output (both `T × d`).
pub fn layer_importance(index: usize, input: &Matrix, output: &Matrix) -> Result<LayerScore> {
    if input.rows() != output.rows() || input.cols() != output.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "layer_importance",
            expected: (input.rows()).to_string(),
            found: (output.rows()).to_string(),
        }
        .into());
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for t in 0..input.rows() {
        let (a, b) = (input.row(t), output.row(t));
        let na = dot(a, a).sqrt();
        let nb = dot(b, b).sqrt();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        sum += (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateTrace(format!(
            "layer {index}: every token vector has zero norm"
        )));
    }
    let redundancy = sum / used as f64;
    Ok(LayerScore {
        index,
        redundancy,
        importance: 1.0 - redundancy,
        skipped_tokens: input.rows() - used,
    })
}

/// Scores every layer present in `trace`, in model order.
pub fn score_layers(trace: &ActivationTrace) -> Result<Vec<LayerScore>> {
    trace
        .layers
        .iter()
        .map(|l| layer_importance(l.index, &l.input, &l.output))
        .collect()
}

/// Ridge term of the normal matrix: `max(relative · trace(AᵀA)/q, floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRule {
    pub relative: f64,
    pub floor: f64,
}

impl Default for EpsilonRule {
    fn default() -> Self {
        Self {
            relative: 1e-6,
            floor: 1e-10,
        }
    }
}

impl EpsilonRule {
    pub fn resolve(&self, gram_trace: f64, q: usize) -> f64 {
        (self.relative * gram_trace / q.max(1) as f64).max(self.floor)
    }
}

/// `A = W·Diag(m ∘ x̄)`, `M = AᵀA + εI` and its extreme eigenpairs.
#[derive(Debug, Clone)]
pub struct NormalMatrixContext {
    pub a: Matrix,
    pub m: Matrix,
    pub epsilon: f64,
    pub max: EigPair,
    pub min: EigPair,
}

fn scaled_weight(weight: &Matrix, mask: &[f64], x_mean: &[f64]) -> Matrix {
    let mut a = weight.clone();
    for i in 0..a.rows() {
        for ((v, m), x) in a.row_mut(i).iter_mut().zip(mask).zip(x_mean) {
            *v *= m * x;
        }
    }
    a
}

fn mask_values(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

fn check_dims(weight: &Matrix, mask_len: usize, x_mean: &[f64]) -> Result<()> {
    for found in [mask_len, x_mean.len()] {
        if found != weight.cols() {
            return Err(LinalgError::DimensionMismatch {
                op: "normal_context",
                expected: (weight.cols()).to_string(),
                found: found.to_string(),
            }
            .into());
        }
    }
    Ok(())
}

/// Context for a real-valued mask with a fixed ε.
pub fn normal_context(
    weight: &Matrix,
    mask: &[f64],
    x_mean: &[f64],
    epsilon: f64,
) -> Result<NormalMatrixContext> {
    check_dims(weight, mask.len(), x_mean)?;
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let a = scaled_weight(weight, mask, x_mean);
    let mut m = a.gram();
    m.add_diagonal(epsilon);
    let opts = EigOptions::default();
    let max = extreme_eigpair(&m, Extreme::Max, opts)?;
    // The gradient scales the λ_min residual by λ_max/λ_min², so polish the
    // min pair well past the default tolerance when the shift allows it.
    let tight = EigOptions {
        tol: 1e-15,
        max_iter: Some(20 * m.rows() + 50),
    };
    let min = extreme_eigpair(&m, Extreme::Min, tight).or_else(|_| extreme_eigpair(&m, Extreme::Min, opts))?;
    Ok(NormalMatrixContext {
        a,
        m,
        epsilon,
        max,
        min,
    })
}

/// Context for a dense's current binary mask; ε resolved from `rule`.
pub fn build_normal_context(
    dense: &DenseLayer,
    x_mean: &[f64],
    rule: EpsilonRule,
) -> Result<NormalMatrixContext> {
    let mask = mask_values(&dense.mask);
    check_dims(&dense.weight, mask.len(), x_mean)?;
    let a = scaled_weight(&dense.weight, &mask, x_mean);
    let gram_trace: f64 = a.data().iter().map(|v| v * v).sum();
    normal_context(&dense.weight, &mask, x_mean, rule.resolve(gram_trace, a.cols()))
}

pub fn condition_number(ctx: &NormalMatrixContext) -> f64 {
    (ctx.max.value / ctx.min.value).max(1.0)
}

/// `κ` of the normal matrix at a real-valued mask, ε held fixed.
pub fn condition_at(weight: &Matrix, mask: &[f64], x_mean: &[f64], epsilon: f64) -> Result<f64> {
    normal_context(weight, mask, x_mean, epsilon).map(|c| condition_number(&c))
}

/// `dλ(v)_j = 2·x̄_j·v_j·(WᵀW(u∘v))_j` with `u = m ∘ x̄`.
fn eigenvalue_sensitivity(weight: &Matrix, mask: &[f64], x_mean: &[f64], v: &[f64]) -> Vec<f64> {
    let uv: Vec<f64> = (0..v.len()).map(|j| mask[j] * x_mean[j] * v[j]).collect();
    let wuv = weight.matvec(&uv).expect("shape checked by context");
    let s = weight.tr_matvec(&wuv).expect("shape checked by context");
    (0..v.len()).map(|j| 2.0 * x_mean[j] * v[j] * s[j]).collect()
}

/// Closed-form `∂κ/∂m` by first-order perturbation of the two extreme
/// eigenvalues.
pub fn condition_gradient(
    ctx: &NormalMatrixContext,
    weight: &Matrix,
    mask: &[f64],
    x_mean: &[f64],
) -> Vector {
    let dmax = eigenvalue_sensitivity(weight, mask, x_mean, &ctx.max.vector);
    let dmin = eigenvalue_sensitivity(weight, mask, x_mean, &ctx.min.vector);
    let (lmax, lmin) = (ctx.max.value, ctx.min.value);
    Vector(
        dmax.iter()
            .zip(&dmin)
            .map(|(a, b)| (a * lmin - lmax * b) / (lmin * lmin))
            .collect(),
    )
}

/// Central differences of `κ(m)` with ε fixed.
pub fn finite_difference_gradient(
    weight: &Matrix,
    mask: &[f64],
    x_mean: &[f64],
    epsilon: f64,
    step: f64,
) -> Result<Vector> {
    let mut g = vec![0.0; mask.len()];
    let mut m = mask.to_vec();
    for j in 0..mask.len() {
        m[j] = mask[j] + step;
        let up = condition_at(weight, &m, x_mean, epsilon)?;
        m[j] = mask[j] - step;
        let down = condition_at(weight, &m, x_mean, epsilon)?;
        m[j] = mask[j];
        g[j] = (up - down) / (2.0 * step);
    }
    Ok(Vector(g))
}

/// Distances from each extreme eigenvalue to its neighbour. An unresolved
/// neighbour (deflated iteration did not converge) counts as a zero gap.
pub fn spectral_gaps(ctx: &NormalMatrixContext) -> (f64, f64) {
    let q = ctx.m.rows();
    if q < 2 {
        return (f64::INFINITY, f64::INFINITY);
    }
    // The Rayleigh quotient error is O(residual²/gap), so a loose residual
    // still resolves gaps far below the threshold.
    let opts = EigOptions {
        tol: 1e-8,
        max_iter: Some(500 + 100 * q),
    };
    let top = extreme_eigpair_deflated(&ctx.m, Extreme::Max, &[&ctx.max.vector], opts)
        .map(|p| ctx.max.value - p.value)
        .unwrap_or(0.0);
    let bottom = extreme_eigpair_deflated(&ctx.m, Extreme::Min, &[&ctx.min.vector], opts)
        .map(|p| p.value - ctx.min.value)
        .unwrap_or(0.0);
    (top.max(0.0), bottom.max(0.0))
}

/// Relative gap below which the perturbation formula is not trusted.
pub const GAP_THRESHOLD: f64 = 1e-6;
/// Step of the finite-difference fallback.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScores {
    /// `Ĩ_f = −g_f + ½·g_f²`; `+∞` at already-pruned inputs.
    pub importance: Vec<f64>,
    pub gradient: Vec<f64>,
    /// Condition number at the current mask.
    pub kappa0: f64,
    pub epsilon: f64,
    /// Gradient came from finite differences because an extreme eigenvalue
    /// was not simple.
    pub fallback: bool,
}

pub fn neuron_importance(
    ctx: &NormalMatrixContext,
    g: &[f64],
    mask: &[bool],
    fallback: bool,
) -> NeuronScores {
    let importance = g
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { -g + 0.5 * g * g } else { f64::INFINITY })
        .collect();
    NeuronScores {
        importance,
        gradient: g.to_vec(),
        kappa0: condition_number(ctx),
        epsilon: ctx.epsilon,
        fallback,
    }
}

/// Ascending importance, ties by lower index; pruned inputs excluded.
pub fn rank_neurons(scores: &NeuronScores) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.importance.len())
        .filter(|&j| scores.importance[j].is_finite())
        .collect();
    idx.sort_by(|&a, &b| {
        scores.importance[a]
            .total_cmp(&scores.importance[b])
            .then(a.cmp(&b))
    });
    idx
}

/// Full scoring of one dense at its current mask.
pub fn score_dense(dense: &DenseLayer, x_mean: &[f64], rule: EpsilonRule) -> Result<NeuronScores> {
    let ctx = build_normal_context(dense, x_mean, rule)?;
    let mask = mask_values(&dense.mask);
    let (top, bottom) = spectral_gaps(&ctx);
    let threshold = GAP_THRESHOLD * ctx.max.value;
    let fallback = top < threshold || bottom < threshold;
    let g = if fallback {
        finite_difference_gradient(&dense.weight, &mask, x_mean, ctx.epsilon, FD_STEP)?
    } else {
        condition_gradient(&ctx, &dense.weight, &mask, x_mean)
    };
    Ok(neuron_importance(&ctx, &g, &dense.mask, fallback))
}
