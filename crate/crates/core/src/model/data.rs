use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelError;

/// Fixed-length byte windows, one token per byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<u32>>,
}

impl TokenBatch {
    pub fn n_samples(&self) -> usize {
        self.sequences.len()
    }

    pub fn tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Consecutive non-overlapping windows of `text`, at most `max_tokens`
    /// tokens in total. A short tail window is kept if it has ≥ 2 tokens.
    pub fn contiguous(text: &[u8], seq_len: usize, max_tokens: usize) -> Self {
        let usable = text.len().min(max_tokens);
        let sequences = text[..usable]
            .chunks(seq_len.max(1))
            .filter(|c| c.len() >= 2)
            .map(|c| c.iter().map(|&b| b as u32).collect())
            .collect();
        Self { sequences }
    }
}

/// Draws `n_samples` windows of `seq_len` bytes at seeded uniform offsets.
pub fn byte_tokenize(
    text: &[u8],
    seq_len: usize,
    n_samples: usize,
    seed: u64,
) -> Result<TokenBatch, ModelError> {
    if seq_len == 0 || text.len() < seq_len {
        return Err(ModelError::CorpusTooShort {
            len: text.len(),
            need: seq_len.max(1),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = text.len() - seq_len;
    let sequences = (0..n_samples)
        .map(|_| {
            let start = rng.gen_range(0..=last);
            text[start..start + seq_len].iter().map(|&b| b as u32).collect()
        })
        .collect();
    Ok(TokenBatch { sequences })
}

/// Leading fraction for training and calibration, trailing remainder held
/// out for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CorpusSplit<'a> {
    pub train: &'a [u8],
    pub heldout: &'a [u8],
}

impl<'a> CorpusSplit<'a> {
    pub const HELDOUT_FRACTION: f64 = 0.1;

    pub fn new(text: &'a [u8]) -> Self {
        let cut = text.len() - (text.len() as f64 * Self::HELDOUT_FRACTION).floor() as usize;
        let (train, heldout) = text.split_at(cut);
        Self { train, heldout }
    }
}
