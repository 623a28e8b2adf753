use serde::{Deserialize, Serialize};

use super::kernels::log_sum_exp;
use super::{Model, ModelError};

/// Output-preservation metrics of `b` relative to `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// Mean over positions of `KL(p_a ‖ p_b)`.
    pub kl: f64,
    /// Mean squared logit difference over all entries.
    pub mse: f64,
}

/// Mean next-token cross-entropy (nats) over every position that has a
/// successor.
pub fn mean_cross_entropy(model: &Model, batch: &[Vec<u32>]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let logits = model.forward(&seq[..seq.len() - 1])?;
        for t in 0..seq.len() - 1 {
            let row = logits.row(t);
            total += log_sum_exp(row) - row[seq[t + 1] as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::TooFewTokens { need: 2, got: 0 });
    }
    Ok(total / count as f64)
}

pub fn perplexity(model: &Model, batch: &[Vec<u32>]) -> Result<f64, ModelError> {
    mean_cross_entropy(model, batch).map(f64::exp)
}

pub fn fidelity(a: &Model, b: &Model, batch: &[Vec<u32>]) -> Result<Fidelity, ModelError> {
    if a.config.vocab != b.config.vocab {
        return Err(ModelError::VocabMismatch {
            a: a.config.vocab,
            b: b.config.vocab,
        });
    }
    let v = a.config.vocab;
    let (mut kl, mut mse, mut positions) = (0.0, 0.0, 0usize);
    for seq in batch {
        if seq.is_empty() {
            continue;
        }
        let la = a.forward(seq)?;
        let lb = b.forward(seq)?;
        for t in 0..seq.len() {
            let (ra, rb) = (la.row(t), lb.row(t));
            let (za, zb) = (log_sum_exp(ra), log_sum_exp(rb));
            let mut k = 0.0;
            for j in 0..v {
                let lpa = ra[j] - za;
                let lpb = rb[j] - zb;
                k += lpa.exp() * (lpa - lpb);
                mse += (ra[j] - rb[j]).powi(2);
            }
            kl += k.max(0.0);
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(ModelError::EmptyBatch);
    }
    Ok(Fidelity {
        kl: kl / positions as f64,
        mse: mse / (positions * v) as f64,
    })
}
