//! Desk-scale decoder transformer used as the pruning workbench.
//!
//! Every dense computes `W·(m̂ ∘ x) + b`, so pruning is expressed entirely
//! through the binary mask `m` and the tuned mask `m̂` until
//! [`Model::fold_masks`] bakes `m̂` into the weight columns.

mod checkpoint;
mod data;
mod forward;
pub(crate) mod kernels;
mod metrics;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, Manifest, TensorEntry, BLOB_FILE, FORMAT_VERSION,
    MANIFEST_FILE,
};
pub use data::{byte_tokenize, CorpusSplit, TokenBatch};
pub use forward::{ActivationTrace, InputGroup, LayerTrace};
pub(crate) use forward::column_mean;
pub use metrics::{fidelity, mean_cross_entropy, perplexity, Fidelity};
pub use train::{train_toy, TrainOptions, TrainOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, Vector};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least {need} tokens, got {got}")]
    TooFewTokens { need: usize, got: usize },
    #[error("layer index {index} out of range ({len} layers)")]
    LayerIndex { index: usize, len: usize },
    #[error("corpus too short: {len} bytes, need at least {need}")]
    CorpusTooShort { len: usize, need: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("vocab mismatch: {a} vs {b}")]
    VocabMismatch { a: usize, b: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Gated,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub ffn_kind: FfnKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 176,
            vocab: 256,
            max_seq: 128,
            ffn_kind: FfnKind::Gated,
        }
    }
}

impl ModelConfig {
    /// Full check for building a fresh model.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.validate_shape()?;
        if self.n_layers < 4 {
            return Err(ModelError::Config("n_layers must be at least 4".into()));
        }
        Ok(())
    }

    /// Structural check only; layer-pruned models may have fewer than four
    /// layers left.
    pub fn validate_shape(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return fail("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.vocab == 0 || self.vocab > 256 {
            return fail("vocab must be in 1..=256 (byte-level)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn dense_kinds(&self) -> &'static [DenseKind] {
        match self.ffn_kind {
            FfnKind::Gated => &DenseKind::GATED,
            FfnKind::Plain => &DenseKind::PLAIN,
        }
    }

    /// `(p, q)` = (output, input) dimension of a dense.
    pub fn dense_shape(&self, kind: DenseKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match kind {
            DenseKind::QProj | DenseKind::KProj | DenseKind::VProj | DenseKind::OProj => (d, d),
            DenseKind::GateProj | DenseKind::UpProj => (f, d),
            DenseKind::DownProj => (d, f),
        }
    }

    /// Dense weights and biases of one layer (norm parameters excluded).
    pub fn layer_param_count(&self) -> usize {
        self.dense_kinds()
            .iter()
            .map(|&k| {
                let (p, q) = self.dense_shape(k);
                p * q + p
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseKind {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl DenseKind {
    pub const GATED: [DenseKind; 7] = [
        DenseKind::QProj,
        DenseKind::KProj,
        DenseKind::VProj,
        DenseKind::OProj,
        DenseKind::GateProj,
        DenseKind::UpProj,
        DenseKind::DownProj,
    ];
    pub const PLAIN: [DenseKind; 6] = [
        DenseKind::QProj,
        DenseKind::KProj,
        DenseKind::VProj,
        DenseKind::OProj,
        DenseKind::UpProj,
        DenseKind::DownProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DenseKind::QProj => "q_proj",
            DenseKind::KProj => "k_proj",
            DenseKind::VProj => "v_proj",
            DenseKind::OProj => "o_proj",
            DenseKind::GateProj => "gate_proj",
            DenseKind::UpProj => "up_proj",
            DenseKind::DownProj => "down_proj",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        DenseKind::GATED.into_iter().find(|k| k.name() == s)
    }

    /// Which captured activation feeds this dense.
    pub fn input_group(self) -> InputGroup {
        match self {
            DenseKind::QProj | DenseKind::KProj | DenseKind::VProj => InputGroup::AttnIn,
            DenseKind::OProj => InputGroup::AttnOut,
            DenseKind::GateProj | DenseKind::UpProj => InputGroup::FfnIn,
            DenseKind::DownProj => InputGroup::FfnHidden,
        }
    }
}

/// One linear map `p × q` with its prune state.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub kind: DenseKind,
    pub weight: Matrix,
    pub bias: Vector,
    /// Binary input mask `m`; `false` = pruned input neuron.
    pub mask: Vec<bool>,
    /// Tuned mask `m̂`; zero wherever `mask` is false.
    pub tuned: Vector,
}

impl DenseLayer {
    pub fn new(kind: DenseKind, weight: Matrix, bias: Vector) -> Self {
        let q = weight.cols();
        Self {
            kind,
            weight,
            bias,
            mask: vec![true; q],
            tuned: Vector::ones(q),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    pub fn pruned_count(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    /// Parameters removed by this dense's mask: `p × (zeros in m)`.
    pub fn pruned_params(&self) -> usize {
        self.out_dim() * self.pruned_count()
    }

    pub fn masks_are_identity(&self) -> bool {
        self.mask.iter().all(|&m| m) && self.tuned.iter().all(|&t| t == 1.0)
    }

    /// Installs a prune state, zeroing `tuned` outside `mask`.
    pub fn set_masks(&mut self, mask: Vec<bool>, mut tuned: Vector) {
        assert_eq!(mask.len(), self.in_dim());
        assert_eq!(tuned.len(), self.in_dim());
        for (t, &m) in tuned.iter_mut().zip(&mask) {
            if !m {
                *t = 0.0;
            }
        }
        self.mask = mask;
        self.tuned = tuned;
    }

    /// Scales weight column `j` by `m̂_j` and resets `m̂` to the binary mask.
    pub fn fold(&mut self) {
        let q = self.in_dim();
        for i in 0..self.out_dim() {
            let row = self.weight.row_mut(i);
            for j in 0..q {
                let t = self.tuned[j];
                if t != 1.0 {
                    row[j] *= t;
                }
            }
        }
        for j in 0..q {
            self.tuned[j] = if self.mask[j] { 1.0 } else { 0.0 };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Vector,
    pub shift: Vector,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            scale: Vector::ones(d),
            shift: Vector::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    /// Position of this layer in the original, unpruned model.
    pub index: usize,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub denses: Vec<DenseLayer>,
}

impl TransformerLayer {
    pub fn dense(&self, kind: DenseKind) -> &DenseLayer {
        self.denses
            .iter()
            .find(|d| d.kind == kind)
            .expect("dense kind absent from layer")
    }

    pub fn dense_mut(&mut self, kind: DenseKind) -> &mut DenseLayer {
        self.denses
            .iter_mut()
            .find(|d| d.kind == kind)
            .expect("dense kind absent from layer")
    }

    pub fn param_count(&self) -> usize {
        self.denses.iter().map(DenseLayer::param_count).sum()
    }

    pub fn pruned_params(&self) -> usize {
        self.denses.iter().map(DenseLayer::pruned_params).sum()
    }

    /// Zeroes `o_proj` and `down_proj` so the layer is an exact residual
    /// pass-through.
    pub fn make_pass_through(&mut self) {
        for kind in [DenseKind::OProj, DenseKind::DownProj] {
            let d = self.dense_mut(kind);
            d.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            d.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub tok_emb: Matrix,
    /// `max_seq × d_model`
    pub pos_emb: Matrix,
    pub layers: Vec<TransformerLayer>,
    pub ln_f: LayerNorm,
    /// `vocab × d_model` projection with bias; never pruned.
    pub lm_head: Matrix,
    pub lm_bias: Vector,
}

impl Model {
    /// All-zero weights with unit norm scales.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate_shape()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|index| TransformerLayer {
                index,
                ln1: LayerNorm::new(d),
                ln2: LayerNorm::new(d),
                denses: config
                    .dense_kinds()
                    .iter()
                    .map(|&k| {
                        let (p, q) = config.dense_shape(k);
                        DenseLayer::new(k, Matrix::zeros(p, q), Vector::zeros(p))
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            tok_emb: Matrix::zeros(config.vocab, d),
            pos_emb: Matrix::zeros(config.max_seq, d),
            layers,
            ln_f: LayerNorm::new(d),
            lm_head: Matrix::zeros(config.vocab, d),
            lm_bias: Vector::zeros(config.vocab),
            config,
        })
    }

    /// Seeded random initialization; all values are exactly representable
    /// in `f32` so checkpoints round-trip bit-exactly.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = model.config.n_layers as f64;
        let mut fill = |m: &mut [f64], std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in m.iter_mut() {
                *v = normal.sample(&mut rng) as f32 as f64;
            }
        };
        fill(model.tok_emb.data_mut(), 0.02);
        fill(model.pos_emb.data_mut(), 0.02);
        for layer in &mut model.layers {
            for dense in &mut layer.denses {
                let q = dense.in_dim() as f64;
                let mut std = 1.0 / q.sqrt();
                if matches!(dense.kind, DenseKind::OProj | DenseKind::DownProj) {
                    std /= (2.0 * n_layers).sqrt();
                }
                fill(dense.weight.data_mut(), std);
            }
        }
        fill(model.lm_head.data_mut(), 0.02);
        Ok(model)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Prunable parameters: dense weights and biases across current layers.
    pub fn dense_param_count(&self) -> usize {
        self.layers.iter().map(TransformerLayer::param_count).sum()
    }

    /// Every parameter, including embeddings, norms and the output head.
    pub fn total_param_count(&self) -> usize {
        let d = self.config.d_model;
        let norms = self.layers.len() * 4 * d + 2 * d;
        self.tok_emb.data().len()
            + self.pos_emb.data().len()
            + self.dense_param_count()
            + norms
            + self.lm_head.data().len()
            + self.lm_bias.len()
    }

    pub fn remove_layer(&mut self, position: usize) -> Result<TransformerLayer, ModelError> {
        if position >= self.layers.len() {
            return Err(ModelError::LayerIndex {
                index: position,
                len: self.layers.len(),
            });
        }
        let removed = self.layers.remove(position);
        self.config.n_layers = self.layers.len();
        Ok(removed)
    }

    /// Current position of the layer whose original index is `index`.
    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.layers.iter().position(|l| l.index == index)
    }

    pub fn fold_masks(&mut self) {
        for layer in &mut self.layers {
            for dense in &mut layer.denses {
                dense.fold();
            }
        }
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.for_each_param_mut(|p| {
            for v in p.iter_mut() {
                *v = *v as f32 as f64;
            }
        });
        for dense in self.layers.iter_mut().flat_map(|l| &mut l.denses) {
            dense.tuned.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Visits every trainable tensor in a fixed order.
    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.tok_emb.data_mut());
        f(self.pos_emb.data_mut());
        for layer in &mut self.layers {
            f(&mut layer.ln1.scale);
            f(&mut layer.ln1.shift);
            f(&mut layer.ln2.scale);
            f(&mut layer.ln2.shift);
            for dense in &mut layer.denses {
                f(dense.weight.data_mut());
                f(&mut dense.bias);
            }
        }
        f(&mut self.ln_f.scale);
        f(&mut self.ln_f.shift);
        f(self.lm_head.data_mut());
        f(&mut self.lm_bias);
    }

    pub(crate) fn for_each_param(&self, mut f: impl FnMut(&[f64])) {
        f(self.tok_emb.data());
        f(self.pos_emb.data());
        for layer in &self.layers {
            f(&layer.ln1.scale);
            f(&layer.ln1.shift);
            f(&layer.ln2.scale);
            f(&layer.ln2.shift);
            for dense in &layer.denses {
                f(dense.weight.data());
                f(&dense.bias);
            }
        }
        f(&self.ln_f.scale);
        f(&self.ln_f.shift);
        f(self.lm_head.data());
        f(&self.lm_bias);
    }
}
