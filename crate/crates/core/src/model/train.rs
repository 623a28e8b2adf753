//! Minimal single-threaded trainer: manual backprop, Adam, warmup + cosine
//! learning rate, global gradient-norm clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{CorpusSplit, TokenBatch};
use super::forward::{layer_forward, LayerCache};
use super::kernels::{gemm, gelu_grad, layer_norm_backward, silu, silu_grad, softmax_row};
use super::metrics::mean_cross_entropy;
use super::{DenseKind, DenseLayer, FfnKind, Model, ModelConfig, ModelError};

pub const MIN_CORPUS_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup: usize,
    pub grad_clip: f64,
    /// Held-out tokens scored at the end of training.
    pub eval_tokens: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            seed: 0,
            batch_size: 4,
            seq_len: 128,
            warmup: 100,
            grad_clip: 1.0,
            eval_tokens: 8192,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    /// Mean next-token cross-entropy (nats) on the held-out slice.
    pub heldout_loss: f64,
}

impl TrainOutcome {
    pub fn heldout_bits_per_byte(&self) -> f64 {
        self.heldout_loss / std::f64::consts::LN_2
    }
}

fn lr_at(opts: &TrainOptions, step: usize) -> f64 {
    let warm = opts.warmup.min(opts.steps / 2).max(1);
    if step < warm {
        return opts.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (opts.steps - warm).max(1) as f64;
    let t = (step - warm) as f64 / span;
    let floor = 0.1;
    opts.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Accumulates `dW += doutᵀ·x`, `db += Σ dout` and returns `dx = dout·W`.
fn dense_backward(d: &DenseLayer, g: &mut DenseLayer, x: &[f64], dout: &[f64], s: usize) -> Vec<f64> {
    let (p, q) = (d.out_dim(), d.in_dim());
    gemm(p, s, q, dout, true, x, false, g.weight.data_mut(), true);
    for row in dout.chunks_exact(p) {
        for (b, v) in g.bias.iter_mut().zip(row) {
            *b += v;
        }
    }
    let mut dx = vec![0.0; s * q];
    gemm(s, p, q, dout, false, d.weight.data(), false, &mut dx, false);
    dx
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    c: &LayerCache,
    dattn: &[f64],
    s: usize,
    d: usize,
    n_heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; s * d];
    let mut dk = vec![0.0; s * d];
    let mut dv = vec![0.0; s * d];
    let mut qh = vec![0.0; s * dh];
    let mut kh = vec![0.0; s * dh];
    let mut vh = vec![0.0; s * dh];
    let mut doh = vec![0.0; s * dh];
    let mut dp = vec![0.0; s * s];
    let mut tmp = vec![0.0; s * dh];
    for h in 0..n_heads {
        for t in 0..s {
            let src = t * d + h * dh;
            qh[t * dh..(t + 1) * dh].copy_from_slice(&c.q[src..src + dh]);
            kh[t * dh..(t + 1) * dh].copy_from_slice(&c.k[src..src + dh]);
            vh[t * dh..(t + 1) * dh].copy_from_slice(&c.v[src..src + dh]);
            doh[t * dh..(t + 1) * dh].copy_from_slice(&dattn[src..src + dh]);
        }
        let p = &c.probs[h * s * s..(h + 1) * s * s];
        gemm(s, dh, s, &doh, false, &vh, true, &mut dp, false);
        // dv = Pᵀ·dO
        gemm(s, s, dh, p, true, &doh, false, &mut tmp, false);
        for t in 0..s {
            let dst = t * d + h * dh;
            dv[dst..dst + dh].copy_from_slice(&tmp[t * dh..(t + 1) * dh]);
        }
        for i in 0..s {
            let pr = &p[i * s..(i + 1) * s];
            let dr = &mut dp[i * s..(i + 1) * s];
            let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
            for j in 0..s {
                dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
            }
        }
        gemm(s, s, dh, &dp, false, &kh, false, &mut tmp, false);
        for t in 0..s {
            let dst = t * d + h * dh;
            dq[dst..dst + dh].copy_from_slice(&tmp[t * dh..(t + 1) * dh]);
        }
        gemm(s, s, dh, &dp, true, &qh, false, &mut tmp, false);
        for t in 0..s {
            let dst = t * d + h * dh;
            dk[dst..dst + dh].copy_from_slice(&tmp[t * dh..(t + 1) * dh]);
        }
    }
    (dq, dk, dv)
}

/// Adds `scale · ∂(Σ CE)/∂θ` for one sequence into `grads`; returns the
/// summed cross-entropy.
pub(crate) fn accumulate_grads(
    model: &Model,
    grads: &mut Model,
    inputs: &[u32],
    targets: &[u32],
    scale: f64,
) -> Result<f64, ModelError> {
    model.check_tokens(inputs)?;
    let cfg = &model.config;
    let (d, v) = (cfg.d_model, cfg.vocab);
    let s = inputs.len();
    let mut x = model.embed(inputs);
    let mut caches: Vec<LayerCache> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut c = LayerCache::default();
        x = layer_forward(layer, model, &x, s, Some(&mut c), None);
        caches.push(c);
    }
    let (mut dlogits, y, fxhat, finv) = model.head(&x);
    let mut loss = 0.0;
    for (t, row) in dlogits.chunks_exact_mut(v).enumerate() {
        let target = targets[t] as usize;
        let target_logit = row[target];
        loss += softmax_row(row) - target_logit;
        row[target] -= 1.0;
        row.iter_mut().for_each(|g| *g *= scale);
    }

    gemm(v, s, d, &dlogits, true, &y, false, grads.lm_head.data_mut(), true);
    for row in dlogits.chunks_exact(v) {
        for (b, g) in grads.lm_bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dy = vec![0.0; s * d];
    gemm(s, v, d, &dlogits, false, model.lm_head.data(), false, &mut dy, false);
    let mut dx = layer_norm_backward(
        &dy,
        &fxhat,
        &finv,
        d,
        &model.ln_f.scale,
        &mut grads.ln_f.scale,
        &mut grads.ln_f.shift,
    );

    for (li, c) in caches.iter().enumerate().rev() {
        let layer = &model.layers[li];
        let gl = &mut grads.layers[li];
        let take = |gl: &mut super::TransformerLayer, kind: DenseKind| -> usize {
            gl.denses.iter().position(|x| x.kind == kind).expect("kind present")
        };
        // out = h + down(f)
        let mut dh = dx.clone();
        let i = take(gl, DenseKind::DownProj);
        let df = dense_backward(layer.dense(DenseKind::DownProj), &mut gl.denses[i], &c.f, &dx, s);
        let db = match cfg.ffn_kind {
            FfnKind::Gated => {
                let mut dg = vec![0.0; df.len()];
                let mut du = vec![0.0; df.len()];
                for j in 0..df.len() {
                    dg[j] = df[j] * c.up[j] * silu_grad(c.gate[j]);
                    du[j] = df[j] * silu(c.gate[j]);
                }
                let i = take(gl, DenseKind::GateProj);
                let mut db = dense_backward(layer.dense(DenseKind::GateProj), &mut gl.denses[i], &c.b, &dg, s);
                let i = take(gl, DenseKind::UpProj);
                let db2 = dense_backward(layer.dense(DenseKind::UpProj), &mut gl.denses[i], &c.b, &du, s);
                db.iter_mut().zip(&db2).for_each(|(a, b)| *a += b);
                db
            }
            FfnKind::Plain => {
                let du: Vec<f64> = df.iter().zip(&c.up).map(|(g, u)| g * gelu_grad(*u)).collect();
                let i = take(gl, DenseKind::UpProj);
                dense_backward(layer.dense(DenseKind::UpProj), &mut gl.denses[i], &c.b, &du, s)
            }
        };
        let dln2 = layer_norm_backward(
            &db,
            &c.ln2_xhat,
            &c.ln2_inv,
            d,
            &layer.ln2.scale,
            &mut gl.ln2.scale,
            &mut gl.ln2.shift,
        );
        dh.iter_mut().zip(&dln2).for_each(|(a, b)| *a += b);
        // h = x + o(attn)
        let i = take(gl, DenseKind::OProj);
        let dattn = dense_backward(layer.dense(DenseKind::OProj), &mut gl.denses[i], &c.attn, &dh, s);
        let (dq, dk, dv) = attention_backward(c, &dattn, s, d, cfg.n_heads);
        let mut da = vec![0.0; s * d];
        for (kind, g) in [(DenseKind::QProj, &dq), (DenseKind::KProj, &dk), (DenseKind::VProj, &dv)] {
            let i = take(gl, kind);
            let part = dense_backward(layer.dense(kind), &mut gl.denses[i], &c.a, g, s);
            da.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        let dln1 = layer_norm_backward(
            &da,
            &c.ln1_xhat,
            &c.ln1_inv,
            d,
            &layer.ln1.scale,
            &mut gl.ln1.scale,
            &mut gl.ln1.shift,
        );
        dx = dh;
        dx.iter_mut().zip(&dln1).for_each(|(a, b)| *a += b);
    }
    for (t, &tok) in inputs.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        let te = grads.tok_emb.row_mut(tok as usize);
        te.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        let pe = grads.pos_emb.row_mut(t);
        pe.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok(loss)
}

fn flatten(model: &Model) -> Vec<f64> {
    let mut out = Vec::new();
    model.for_each_param(|p| out.extend_from_slice(p));
    out
}

fn zero_grads(grads: &mut Model) {
    grads.for_each_param_mut(|p| p.iter_mut().for_each(|v| *v = 0.0));
}

/// Trains a fresh `config` model on the leading 90% of `corpus`.
pub fn train_toy(config: &ModelConfig, corpus: &[u8], opts: &TrainOptions) -> Result<TrainOutcome, ModelError> {
    if corpus.len() < MIN_CORPUS_BYTES {
        return Err(ModelError::CorpusTooShort {
            len: corpus.len(),
            need: MIN_CORPUS_BYTES,
        });
    }
    if opts.seq_len == 0 || opts.seq_len > config.max_seq || opts.batch_size == 0 {
        return Err(ModelError::Config(format!(
            "seq_len must be in 1..={} and batch_size positive",
            config.max_seq
        )));
    }
    let split = CorpusSplit::new(corpus);
    let mut model = Model::random(config.clone(), opts.seed)?;
    let mut grads = Model::zeros(config.clone())?;
    let n_params = flatten(&model).len();
    let (mut m1, mut m2) = (vec![0.0; n_params], vec![0.0; n_params]);
    let (beta1, beta2, adam_eps) = (0.9, 0.99, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
    let window = opts.seq_len + 1;
    let last = split.train.len() - window;
    let mut curve = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        zero_grads(&mut grads);
        let scale = 1.0 / (opts.batch_size * opts.seq_len) as f64;
        let mut loss = 0.0;
        for _ in 0..opts.batch_size {
            let start = rng.gen_range(0..=last);
            let tokens: Vec<u32> = split.train[start..start + window].iter().map(|&b| b as u32).collect();
            loss += accumulate_grads(&model, &mut grads, &tokens[..opts.seq_len], &tokens[1..], scale)?;
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(ModelError::Divergence { step, loss });
        }
        let g = flatten(&grads);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(ModelError::Divergence { step, loss: norm });
        }
        let clip = if norm > opts.grad_clip { opts.grad_clip / norm } else { 1.0 };
        let lr = lr_at(opts, step);
        let t = (step + 1) as i32;
        let (bc1, bc2) = (1.0 - f64::powi(beta1, t), 1.0 - f64::powi(beta2, t));
        let mut k = 0;
        model.for_each_param_mut(|p| {
            for w in p.iter_mut() {
                let gi = g[k] * clip;
                m1[k] = beta1 * m1[k] + (1.0 - beta1) * gi;
                m2[k] = beta2 * m2[k] + (1.0 - beta2) * gi * gi;
                *w -= lr * (m1[k] / bc1) / ((m2[k] / bc2).sqrt() + adam_eps);
                k += 1;
            }
        });
        curve.push(CurvePoint {
            step,
            lr,
            loss,
            grad_norm: norm,
        });
    }
    model.round_to_f32();
    let eval = TokenBatch::contiguous(split.heldout, config.max_seq, opts.eval_tokens);
    let heldout_loss = mean_cross_entropy(&model, &eval.sequences)?;
    Ok(TrainOutcome {
        model,
        curve,
        heldout_loss,
    })
}
