//! Independent reference implementations used only by tests.
#![allow(dead_code)]

use comp_core::linalg::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Triple loop in i-j-k order with an explicit accumulator.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Orthogonal matrix by modified Gram-Schmidt on a random square matrix.
pub fn random_orthogonal(rng: &mut impl Rng, n: usize) -> Matrix {
    let a = random_matrix(rng, n, n);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| a.get(i, j)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
            }
        }
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        cols.push(v);
    }
    let mut q = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            q.set(i, j, c[i]);
        }
    }
    q
}

/// `Q·Diag(d)·Qᵀ`, exactly symmetrized.
pub fn spd_from_spectrum(q: &Matrix, d: &[f64]) -> Matrix {
    let n = d.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..n).map(|k| q.get(i, k) * d[k] * q.get(j, k)).sum();
            m.set(i, j, s);
            m.set(j, i, s);
        }
    }
    m
}

/// Random SPD matrix with log-uniform spectrum in `[1, cond]`; returns the
/// matrix and its sorted (descending) eigenvalues.
pub fn random_spd(rng: &mut impl Rng, n: usize, cond: f64) -> (Matrix, Vec<f64>) {
    let q = random_orthogonal(rng, n);
    let mut d: Vec<f64> = (0..n)
        .map(|_| cond.powf(rng.gen_range(0.0..1.0)))
        .collect();
    d[0] = cond;
    if n > 1 {
        d[n - 1] = 1.0;
    }
    let m = spd_from_spectrum(&q, &d);
    d.sort_by(|a, b| b.partial_cmp(a).unwrap());
    (m, d)
}

/// Cyclic Jacobi eigensolver: eigenvalues in descending order with the
/// matching eigenvectors as columns.
pub fn jacobi_eigen(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        let scale: f64 = (0..n).map(|i| a.get(i, i).powi(2)).sum::<f64>();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a.get(j, j).partial_cmp(&a.get(i, i)).unwrap());
    let vals = idx.iter().map(|&i| a.get(i, i)).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        for k in 0..n {
            vecs.set(k, c, v.get(k, i));
        }
    }
    (vals, vecs)
}

/// Regularized pseudo-inverse solve `x = (AᵀA + damping·I)⁺ Aᵀy` through the
/// Jacobi eigendecomposition of `AᵀA`.
pub fn pinv_solve(a: &Matrix, y: &[f64], damping: f64) -> Vec<f64> {
    let n = a.cols();
    let mut ata = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..a.rows()).map(|r| a.get(r, i) * a.get(r, j)).sum();
            ata.set(i, j, s);
        }
    }
    let aty: Vec<f64> = (0..n)
        .map(|i| (0..a.rows()).map(|r| a.get(r, i) * y[r]).sum())
        .collect();
    let (vals, vecs) = jacobi_eigen(&ata);
    let top = vals[0].abs().max(1e-300);
    let mut x = vec![0.0; n];
    for k in 0..n {
        let lam = vals[k] + damping;
        if lam.abs() <= 1e-13 * top {
            continue;
        }
        let proj: f64 = (0..n).map(|i| vecs.get(i, k) * aty[i]).sum();
        for i in 0..n {
            x[i] += vecs.get(i, k) * proj / lam;
        }
    }
    x
}

pub fn two_pass_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

/// `M = AᵀA + εI` with `A = W·Diag(m ∘ x̄)`, built entry by entry.
pub fn explicit_normal(weight: &Matrix, mask: &[f64], x_mean: &[f64], eps: f64) -> Matrix {
    let (p, q) = (weight.rows(), weight.cols());
    let mut m = Matrix::zeros(q, q);
    for i in 0..q {
        for j in 0..q {
            let mut s = 0.0;
            for r in 0..p {
                s += weight.get(r, i) * mask[i] * x_mean[i] * weight.get(r, j) * mask[j] * x_mean[j];
            }
            if i == j {
                s += eps;
            }
            m.set(i, j, s);
        }
    }
    m
}

/// `λ_max / λ_min` of the explicit normal matrix through Jacobi.
///
/// With more inputs than outputs `AᵀA` is singular, so `λ_min = ε` exactly.
/// Using that value instead of Jacobi's (absolute error ~1e-16·λ_max) keeps
/// difference quotients usable at κ ~ 1e6.
pub fn jacobi_kappa(weight: &Matrix, mask: &[f64], x_mean: &[f64], eps: f64) -> f64 {
    let (vals, _) = jacobi_eigen(&explicit_normal(weight, mask, x_mean, eps));
    let min = if weight.cols() > weight.rows() { eps } else { vals[vals.len() - 1] };
    vals[0] / min
}

/// Central differences of `jacobi_kappa`.
pub fn fd_kappa_gradient(weight: &Matrix, mask: &[f64], x_mean: &[f64], eps: f64, h: f64) -> Vec<f64> {
    let mut m = mask.to_vec();
    (0..mask.len())
        .map(|j| {
            m[j] = mask[j] + h;
            let up = jacobi_kappa(weight, &m, x_mean, eps);
            m[j] = mask[j] - h;
            let down = jacobi_kappa(weight, &m, x_mean, eps);
            m[j] = mask[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Rows `(t, i)`: `A[(t,i), k] = W[i, R_k]·x_t[R_k]`, target `W·target_t`.
pub fn stacked_design(weight: &Matrix, inputs: &Matrix, targets: &Matrix, retained: &[usize]) -> (Matrix, Vec<f64>) {
    let (p, t_count) = (weight.rows(), inputs.rows());
    let mut a = Matrix::zeros(t_count * p, retained.len());
    let mut y = vec![0.0; t_count * p];
    for t in 0..t_count {
        for i in 0..p {
            for (k, &j) in retained.iter().enumerate() {
                a.set(t * p + i, k, weight.get(i, j) * inputs.get(t, j));
            }
            y[t * p + i] = (0..weight.cols()).map(|j| weight.get(i, j) * targets.get(t, j)).sum();
        }
    }
    (a, y)
}

/// `Σ_t ‖W·Diag(x_t)·z − W·target_t‖²`, token by token.
pub fn direct_residual(weight: &Matrix, inputs: &Matrix, targets: &Matrix, z: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..inputs.rows() {
        for i in 0..weight.rows() {
            let mut r = 0.0;
            for j in 0..weight.cols() {
                r += weight.get(i, j) * (inputs.get(t, j) * z[j] - targets.get(t, j));
            }
            s += r * r;
        }
    }
    s
}

pub mod reference {
    //! Straight-line transformer forward written from the architecture
    //! description: pre-norm blocks, causal softmax attention, SiLU-gated
    //! or GELU feed-forward, final norm and a biased head.

    use comp_core::model::{FfnKind, LayerNorm};
    use comp_core::{DenseKind, DenseLayer, Matrix, Model};

    const EPS: f64 = 1e-5;

    fn norm(x: &[Vec<f64>], ln: &LayerNorm) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + EPS).sqrt() * ln.scale[j] + ln.shift[j])
                    .collect()
            })
            .collect()
    }

    fn linear(x: &[Vec<f64>], d: &DenseLayer) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..d.weight.rows())
                    .map(|i| {
                        let mut s = d.bias[i];
                        for j in 0..row.len() {
                            s += d.weight.get(i, j) * d.tuned[j] * row[j];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
            .collect()
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn dense<'a>(layer: &'a comp_core::model::TransformerLayer, kind: DenseKind) -> &'a DenseLayer {
        layer.denses.iter().find(|d| d.kind == kind).unwrap()
    }

    /// Logits, one row per position.
    pub fn forward(model: &Model, tokens: &[u32]) -> Matrix {
        let cfg = &model.config;
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let dh = d / h;
        let mut x: Vec<Vec<f64>> = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| (0..d).map(|j| model.tok_emb.get(tok as usize, j) + model.pos_emb.get(t, j)).collect())
            .collect();
        let s = tokens.len();
        for layer in &model.layers {
            let a = norm(&x, &layer.ln1);
            let q = linear(&a, dense(layer, DenseKind::QProj));
            let k = linear(&a, dense(layer, DenseKind::KProj));
            let v = linear(&a, dense(layer, DenseKind::VProj));
            let mut att = vec![vec![0.0; d]; s];
            for head in 0..h {
                let off = head * dh;
                for i in 0..s {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| (0..dh).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = scores.iter().map(|z| (z - mx).exp()).collect();
                    let sum: f64 = w.iter().sum();
                    for c in 0..dh {
                        att[i][off + c] = (0..=i).map(|j| w[j] / sum * v[j][off + c]).sum();
                    }
                }
            }
            let o = linear(&att, dense(layer, DenseKind::OProj));
            let hres = add(&x, &o);
            let b = norm(&hres, &layer.ln2);
            let f: Vec<Vec<f64>> = match cfg.ffn_kind {
                FfnKind::Gated => {
                    let g = linear(&b, dense(layer, DenseKind::GateProj));
                    let u = linear(&b, dense(layer, DenseKind::UpProj));
                    g.iter()
                        .zip(&u)
                        .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| silu(*a) * b).collect())
                        .collect()
                }
                FfnKind::Plain => linear(&b, dense(layer, DenseKind::UpProj))
                    .iter()
                    .map(|r| r.iter().map(|&u| gelu(u)).collect())
                    .collect(),
            };
            let down = linear(&f, dense(layer, DenseKind::DownProj));
            x = add(&hres, &down);
        }
        let y = norm(&x, &model.ln_f);
        let mut out = Matrix::zeros(s, cfg.vocab);
        for t in 0..s {
            for i in 0..cfg.vocab {
                let mut z = model.lm_bias[i];
                for j in 0..d {
                    z += model.lm_head.get(i, j) * y[t][j];
                }
                out.set(t, i, z);
            }
        }
        out
    }

    fn log_softmax(row: &[f64]) -> Vec<f64> {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.iter().map(|v| v - lse).collect()
    }

    /// Mean next-token negative log-likelihood over the batch.
    pub fn cross_entropy(model: &Model, batch: &[Vec<u32>]) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for seq in batch.iter().filter(|s| s.len() >= 2) {
            let logits = forward(model, seq);
            for t in 0..seq.len() - 1 {
                total -= log_softmax(logits.row(t))[seq[t + 1] as usize];
                n += 1;
            }
        }
        total / n as f64
    }

    /// Mean KL(a ‖ b) per position and mean squared logit gap.
    pub fn fidelity(a: &Model, b: &Model, batch: &[Vec<u32>]) -> (f64, f64) {
        let (mut kl, mut mse, mut n, mut entries) = (0.0, 0.0, 0usize, 0usize);
        for seq in batch {
            let (la, lb) = (forward(a, seq), forward(b, seq));
            for t in 0..seq.len() {
                let (pa, pb) = (log_softmax(la.row(t)), log_softmax(lb.row(t)));
                kl += pa.iter().zip(&pb).map(|(x, y)| x.exp() * (x - y)).sum::<f64>().max(0.0);
                mse += la.row(t).iter().zip(lb.row(t)).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                n += 1;
                entries += la.cols();
            }
        }
        (kl / n as f64, mse / entries as f64)
    }
}

/// Small but complete architecture for fast model tests.
pub fn tiny_config(ffn: comp_core::model::FfnKind) -> comp_core::ModelConfig {
    comp_core::ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        vocab: 256,
        max_seq: 32,
        ffn_kind: ffn,
    }
}

/// Random bytes long enough for a corpus split and calibration windows.
pub fn random_corpus(seed: u64, len: usize) -> Vec<u8> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(32u8..127)).collect()
}

/// Random model with non-trivial biases and norm parameters.
pub fn jittered_model(cfg: comp_core::ModelConfig, seed: u64) -> comp_core::Model {
    let mut m = comp_core::Model::random(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xabcd);
    let mut fill = |v: &mut [f64], c: f64, s: f64| {
        v.iter_mut().for_each(|x| *x = c * *x + if s > 0.0 { r.gen_range(-s..s) } else { 0.0 })
    };
    fill(m.tok_emb.data_mut(), 25.0, 0.1);
    fill(m.pos_emb.data_mut(), 10.0, 0.1);
    for layer in &mut m.layers {
        fill(&mut layer.ln1.scale, 1.0, 0.3);
        fill(&mut layer.ln1.shift, 1.0, 0.2);
        fill(&mut layer.ln2.scale, 1.0, 0.3);
        fill(&mut layer.ln2.shift, 1.0, 0.2);
        for d in &mut layer.denses {
            fill(&mut d.bias, 1.0, 0.1);
        }
    }
    fill(&mut m.ln_f.scale, 1.0, 0.3);
    fill(m.lm_head.data_mut(), 25.0, 0.0);
    fill(&mut m.lm_bias, 1.0, 0.1);
    m
}

pub fn random_tokens(seed: u64, len: usize) -> Vec<u32> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(0..256)).collect()
}

/// Richardson-extrapolated central differences of `jacobi_kappa`
/// (`(4·D(h/2) − D(h))/3`), accurate to O(h⁴). A larger step keeps the
/// eigenvalue round-off divided by `h` small when κ is large.
pub fn richardson_kappa_gradient(weight: &Matrix, mask: &[f64], x_mean: &[f64], eps: f64, h: f64) -> Vec<f64> {
    let coarse = fd_kappa_gradient(weight, mask, x_mean, eps, h);
    let fine = fd_kappa_gradient(weight, mask, x_mean, eps, h / 2.0);
    fine.iter().zip(&coarse).map(|(f, c)| (4.0 * f - c) / 3.0).collect()
}
