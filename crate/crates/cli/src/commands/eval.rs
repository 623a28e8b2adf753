use std::path::PathBuf;

use clap::Args;
use comp_core::model::{fidelity, perplexity, CorpusSplit, TokenBatch};
use serde::{Deserialize, Serialize};

use super::load_model;
use crate::config::{require, resolve, Flags};
use crate::error::CliError;
use crate::manifest::{read_bytes, write_json, RunManifest};

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Byte file to score: its held-out tail, or all of it with `--whole-file`.
    #[arg(long)]
    pub corpus_or_text: Option<PathBuf>,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub whole_file: bool,
    #[arg(long)]
    pub eval_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON metrics file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalJob {
    pub model: Option<PathBuf>,
    pub corpus_or_text: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub whole_file: bool,
    pub eval_tokens: usize,
    /// Recorded for provenance; evaluation itself draws no randomness.
    pub seed: u64,
}

impl Default for EvalJob {
    fn default() -> Self {
        Self {
            model: None,
            corpus_or_text: None,
            baseline: None,
            out: None,
            whole_file: false,
            eval_tokens: 8192,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub manifest: RunManifest,
    pub tokens: usize,
    pub perplexity: f64,
    pub baseline_perplexity: Option<f64>,
    pub kl: Option<f64>,
    pub logit_mse: Option<f64>,
}

pub fn run(a: EvalArgs) -> Result<(), CliError> {
    let mut f = Flags::default();
    f.set("model", a.model)
        .set("corpus_or_text", a.corpus_or_text)
        .set("baseline", a.baseline)
        .set("out", a.out)
        .flag("whole_file", a.whole_file)
        .set("eval_tokens", a.eval_tokens)
        .set("seed", a.seed);
    let job: EvalJob = resolve(a.config.as_deref(), f.into_map())?;
    let model_dir = require(&job.model, "model")?;
    let text_path = require(&job.corpus_or_text, "corpus-or-text")?;
    let model = load_model(model_dir)?;
    let bytes = read_bytes(text_path)?;
    let mut manifest = RunManifest::new("eval", job.seed, &job);
    manifest.add_checkpoint("model", model_dir)?;
    manifest.add_file("corpus_or_text", text_path)?;

    let text = if job.whole_file {
        &bytes[..]
    } else {
        CorpusSplit::new(&bytes).heldout
    };
    let batch = TokenBatch::contiguous(text, model.config.max_seq, job.eval_tokens);
    let ppl = perplexity(&model, &batch.sequences)?;
    let mut report = EvalReport {
        manifest,
        tokens: batch.tokens(),
        perplexity: ppl,
        baseline_perplexity: None,
        kl: None,
        logit_mse: None,
    };
    println!("perplexity {ppl:.6}");
    if let Some(base_dir) = &job.baseline {
        let base = load_model(base_dir)?;
        report.manifest.add_checkpoint("baseline", base_dir)?;
        let fid = fidelity(&base, &model, &batch.sequences)?;
        let bp = perplexity(&base, &batch.sequences)?;
        println!("baseline perplexity {bp:.6}");
        println!("kl {:.6e}", fid.kl);
        println!("logit_mse {:.6e}", fid.mse);
        report.baseline_perplexity = Some(bp);
        report.kl = Some(fid.kl);
        report.logit_mse = Some(fid.mse);
    }
    if let Some(out) = &job.out {
        write_json(out, &report)?;
    }
    Ok(())
}
