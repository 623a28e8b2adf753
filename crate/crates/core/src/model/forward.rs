use super::kernels::{dense_forward, gelu, gemm, layer_norm, silu};
use super::{DenseKind, DenseLayer, FfnKind, Model, ModelError, TransformerLayer};
use crate::linalg::Matrix;

/// Shared activation feeding one or more denses of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputGroup {
    /// `ln1(x)`, feeds q/k/v.
    AttnIn = 0,
    /// Concatenated head outputs, feeds o_proj.
    AttnOut = 1,
    /// `ln2(h)`, feeds gate/up.
    FfnIn = 2,
    /// FFN hidden activation, feeds down_proj.
    FfnHidden = 3,
}

/// Captured activations of one transformer layer. All matrices are
/// token-major (`T × width`), sequences concatenated in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Original index of the layer that produced this trace.
    pub index: usize,
    pub input: Matrix,
    pub output: Matrix,
    /// Dense inputs indexed by [`InputGroup`]; absent for layer-only capture.
    pub groups: Option<[Matrix; 4]>,
}

impl LayerTrace {
    pub fn dense_input(&self, kind: DenseKind) -> Option<&Matrix> {
        self.groups.as_ref().map(|g| &g[kind.input_group() as usize])
    }

    /// Token-mean of the input to `kind`.
    pub fn dense_input_mean(&self, kind: DenseKind) -> Option<Vec<f64>> {
        self.dense_input(kind).map(column_mean)
    }
}

pub(crate) fn column_mean(x: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for t in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(t)) {
            *m += v;
        }
    }
    let n = x.rows().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
    /// Length of each captured sequence; `tokens()` is their sum.
    pub seq_lens: Vec<usize>,
}

impl ActivationTrace {
    pub fn tokens(&self) -> usize {
        self.seq_lens.iter().sum()
    }

    pub fn by_index(&self, index: usize) -> Option<&LayerTrace> {
        self.layers.iter().find(|l| l.index == index)
    }
}

/// Intermediate values of one layer for one sequence, kept for backprop.
#[derive(Debug, Default)]
pub(crate) struct LayerCache {
    pub ln1_xhat: Vec<f64>,
    pub ln1_inv: Vec<f64>,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `n_heads × S × S`, zeros above the diagonal.
    pub probs: Vec<f64>,
    pub attn: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_inv: Vec<f64>,
    pub b: Vec<f64>,
    pub gate: Vec<f64>,
    pub up: Vec<f64>,
    pub f: Vec<f64>,
}

/// Applies `W·(m̂ ∘ x) + b` row-wise.
pub(crate) fn apply_dense(dense: &DenseLayer, x: &[f64], s: usize) -> Vec<f64> {
    let (p, q) = (dense.out_dim(), dense.in_dim());
    if dense.masks_are_identity() {
        dense_forward(x, s, dense.weight.data(), p, q, &dense.bias)
    } else {
        let mut xm = x.to_vec();
        for row in xm.chunks_exact_mut(q) {
            for (v, t) in row.iter_mut().zip(dense.tuned.iter()) {
                *v *= t;
            }
        }
        dense_forward(&xm, s, dense.weight.data(), p, q, &dense.bias)
    }
}

/// Causal multi-head attention over one sequence; returns concatenated head
/// outputs and (optionally) the probability matrices.
pub(crate) fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    d: usize,
    n_heads: usize,
    mut probs_out: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s * d];
    let mut qh = vec![0.0; s * dh];
    let mut kh = vec![0.0; s * dh];
    let mut vh = vec![0.0; s * dh];
    let mut scores = vec![0.0; s * s];
    let mut oh = vec![0.0; s * dh];
    if let Some(p) = probs_out.as_deref_mut() {
        p.clear();
        p.resize(n_heads * s * s, 0.0);
    }
    for h in 0..n_heads {
        for t in 0..s {
            let src = t * d + h * dh;
            qh[t * dh..(t + 1) * dh].copy_from_slice(&q[src..src + dh]);
            kh[t * dh..(t + 1) * dh].copy_from_slice(&k[src..src + dh]);
            vh[t * dh..(t + 1) * dh].copy_from_slice(&v[src..src + dh]);
        }
        gemm(s, dh, s, &qh, false, &kh, true, &mut scores, false);
        for i in 0..s {
            let row = &mut scores[i * s..(i + 1) * s];
            let live = &mut row[..=i];
            let max = live.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
            let mut sum = 0.0;
            for x in live.iter_mut() {
                *x = (*x * scale - max).exp();
                sum += *x;
            }
            for x in live.iter_mut() {
                *x /= sum;
            }
            row[(i + 1)..].iter_mut().for_each(|x| *x = 0.0);
        }
        gemm(s, s, dh, &scores, false, &vh, false, &mut oh, false);
        for t in 0..s {
            let dst = t * d + h * dh;
            out[dst..dst + dh].copy_from_slice(&oh[t * dh..(t + 1) * dh]);
        }
        if let Some(p) = probs_out.as_deref_mut() {
            p[h * s * s..(h + 1) * s * s].copy_from_slice(&scores);
        }
    }
    out
}

/// Group activations produced while running a layer.
pub(crate) struct LayerTaps {
    pub groups: [Vec<f64>; 4],
}

/// Runs one layer over one sequence (`x` is `s × d`).
pub(crate) fn layer_forward(
    layer: &TransformerLayer,
    model: &Model,
    x: &[f64],
    s: usize,
    cache: Option<&mut LayerCache>,
    taps: Option<&mut LayerTaps>,
) -> Vec<f64> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let (a, ln1_xhat, ln1_inv) = layer_norm(x, d, &layer.ln1.scale, &layer.ln1.shift);
    let q = apply_dense(layer.dense(DenseKind::QProj), &a, s);
    let k = apply_dense(layer.dense(DenseKind::KProj), &a, s);
    let v = apply_dense(layer.dense(DenseKind::VProj), &a, s);
    let mut probs = Vec::new();
    let attn = attention(
        &q,
        &k,
        &v,
        s,
        d,
        cfg.n_heads,
        cache.is_some().then_some(&mut probs),
    );
    let o = apply_dense(layer.dense(DenseKind::OProj), &attn, s);
    let h: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let (b, ln2_xhat, ln2_inv) = layer_norm(&h, d, &layer.ln2.scale, &layer.ln2.shift);
    let (gate, up, f) = match cfg.ffn_kind {
        FfnKind::Gated => {
            let g = apply_dense(layer.dense(DenseKind::GateProj), &b, s);
            let u = apply_dense(layer.dense(DenseKind::UpProj), &b, s);
            let f: Vec<f64> = g.iter().zip(&u).map(|(g, u)| silu(*g) * u).collect();
            (g, u, f)
        }
        FfnKind::Plain => {
            let u = apply_dense(layer.dense(DenseKind::UpProj), &b, s);
            let f: Vec<f64> = u.iter().map(|u| gelu(*u)).collect();
            (Vec::new(), u, f)
        }
    };
    let down = apply_dense(layer.dense(DenseKind::DownProj), &f, s);
    let out: Vec<f64> = h.iter().zip(&down).map(|(a, b)| a + b).collect();

    if let Some(t) = taps {
        t.groups = [a.clone(), attn.clone(), b.clone(), f.clone()];
    }
    if let Some(c) = cache {
        *c = LayerCache {
            ln1_xhat,
            ln1_inv,
            a,
            q,
            k,
            v,
            probs,
            attn,
            ln2_xhat,
            ln2_inv,
            b,
            gate,
            up,
            f,
        };
    }
    out
}

impl Model {
    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.config.d_model;
        let mut x = vec![0.0; tokens.len() * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.tok_emb.row(tok as usize);
            let p = self.pos_emb.row(t);
            for j in 0..d {
                x[t * d + j] = e[j] + p[j];
            }
        }
        x
    }

    pub(crate) fn head(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.config.d_model;
        let s = x.len() / d;
        let (y, xhat, inv) = layer_norm(x, d, &self.ln_f.scale, &self.ln_f.shift);
        let logits = dense_forward(&y, s, self.lm_head.data(), self.config.vocab, d, &self.lm_bias);
        (logits, y, xhat, inv)
    }

    /// Logits for one sequence, one row per position (`S × vocab`).
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix, ModelError> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let s = tokens.len();
        let mut x = self.embed(tokens);
        for layer in &self.layers {
            x = layer_forward(layer, self, &x, s, None, None);
        }
        let (logits, ..) = self.head(&x);
        Ok(Matrix::from_vec_unchecked(s, self.config.vocab, logits))
    }

    /// Forward over a batch, capturing every layer's input and output and,
    /// when `dense_inputs` is set, every dense input. Logits of all
    /// sequences are concatenated row-wise.
    pub fn forward_capture(
        &self,
        batch: &[Vec<u32>],
        dense_inputs: bool,
    ) -> Result<(Matrix, ActivationTrace), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for seq in batch {
            self.check_tokens(seq)?;
            if seq.is_empty() {
                return Err(ModelError::EmptyBatch);
            }
        }
        let d = self.config.d_model;
        let total: usize = batch.iter().map(Vec::len).sum();
        let n = self.layers.len();
        let mut inputs: Vec<Vec<f64>> = vec![Vec::with_capacity(total * d); n];
        let mut outputs: Vec<Vec<f64>> = vec![Vec::with_capacity(total * d); n];
        let mut groups: Vec<[Vec<f64>; 4]> = (0..n).map(|_| Default::default()).collect();
        let mut logits = Vec::with_capacity(total * self.config.vocab);
        let mut taps = LayerTaps {
            groups: Default::default(),
        };
        for seq in batch {
            let s = seq.len();
            let mut x = self.embed(seq);
            for (i, layer) in self.layers.iter().enumerate() {
                inputs[i].extend_from_slice(&x);
                x = layer_forward(layer, self, &x, s, None, dense_inputs.then_some(&mut taps));
                outputs[i].extend_from_slice(&x);
                if dense_inputs {
                    for g in 0..4 {
                        groups[i][g].extend_from_slice(&taps.groups[g]);
                    }
                }
            }
            logits.extend(self.head(&x).0);
        }
        let widths = |layer: &TransformerLayer| {
            [
                d,
                d,
                d,
                layer.dense(DenseKind::DownProj).in_dim(),
            ]
        };
        let layers = self
            .layers
            .iter()
            .zip(inputs.into_iter().zip(outputs))
            .zip(groups)
            .map(|((layer, (inp, out)), g)| LayerTrace {
                index: layer.index,
                input: Matrix::from_vec_unchecked(total, d, inp),
                output: Matrix::from_vec_unchecked(total, d, out),
                groups: dense_inputs.then(|| {
                    let w = widths(layer);
                    let [g0, g1, g2, g3] = g;
                    [
                        Matrix::from_vec_unchecked(total, w[0], g0),
                        Matrix::from_vec_unchecked(total, w[1], g1),
                        Matrix::from_vec_unchecked(total, w[2], g2),
                        Matrix::from_vec_unchecked(total, w[3], g3),
                    ]
                }),
            })
            .collect();
        Ok((
            Matrix::from_vec_unchecked(total, self.config.vocab, logits),
            ActivationTrace {
                layers,
                seq_lens: batch.iter().map(Vec::len).collect(),
            },
        ))
    }

    /// Re-runs the layer at `position` on a captured (concatenated) input.
    pub fn replay_layer(&self, position: usize, input: &Matrix, seq_lens: &[usize]) -> Matrix {
        let d = self.config.d_model;
        let layer = &self.layers[position];
        let mut out = Vec::with_capacity(input.data().len());
        let mut start = 0;
        for &s in seq_lens {
            let x = &input.data()[start * d..(start + s) * d];
            out.extend(layer_forward(layer, self, x, s, None, None));
            start += s;
        }
        Matrix::from_vec_unchecked(input.rows(), d, out)
    }
}
