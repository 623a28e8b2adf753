use std::path::PathBuf;

use clap::Args;
use comp_core::model::{save_checkpoint, train_toy, ModelConfig, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::config::{require, resolve, Flags};
use crate::error::CliError;
use crate::manifest::{csv_error, csv_writer, flush_csv, write_json, RunManifest, CSV_SCHEMA_VERSION};

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON file mirroring the flags; a `model` key sets the architecture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub eval_tokens: Option<usize>,
    /// Training-curve CSV (default `<out>/curve.csv`).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup: usize,
    pub grad_clip: f64,
    pub eval_tokens: usize,
    pub model: ModelConfig,
}

impl Default for TrainJob {
    fn default() -> Self {
        let o = TrainOptions::default();
        Self {
            corpus: None,
            out: None,
            curve: None,
            steps: o.steps,
            lr: o.lr,
            seed: o.seed,
            batch_size: o.batch_size,
            seq_len: o.seq_len,
            warmup: o.warmup,
            grad_clip: o.grad_clip,
            eval_tokens: o.eval_tokens,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct TrainReport {
    manifest: RunManifest,
    steps: usize,
    final_loss: f64,
    heldout_loss: f64,
    heldout_bits_per_byte: f64,
    dense_params: usize,
    total_params: usize,
}

pub fn run(a: TrainArgs) -> Result<(), CliError> {
    let mut f = Flags::default();
    f.set("corpus", a.corpus)
        .set("out", a.out)
        .set("curve", a.curve)
        .set("steps", a.steps)
        .set("lr", a.lr)
        .set("seed", a.seed)
        .set("batch_size", a.batch_size)
        .set("seq_len", a.seq_len)
        .set("warmup", a.warmup)
        .set("grad_clip", a.grad_clip)
        .set("eval_tokens", a.eval_tokens);
    let job: TrainJob = resolve(a.config.as_deref(), f.into_map())?;
    let corpus_path = require(&job.corpus, "corpus")?;
    let out = require(&job.out, "out")?;
    let corpus = crate::manifest::read_bytes(corpus_path)?;
    let mut manifest = RunManifest::new("train", job.seed, &job);
    manifest.add_file("corpus", corpus_path)?;

    let opts = TrainOptions {
        steps: job.steps,
        lr: job.lr,
        seed: job.seed,
        batch_size: job.batch_size,
        seq_len: job.seq_len,
        warmup: job.warmup,
        grad_clip: job.grad_clip,
        eval_tokens: job.eval_tokens,
    };
    let started = std::time::Instant::now();
    let outcome = train_toy(&job.model, &corpus, &opts)?;
    eprintln!("trained {} steps in {:.1}s", job.steps, started.elapsed().as_secs_f64());

    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    save_checkpoint(&outcome.model, out)?;

    let curve_path = job.curve.clone().unwrap_or_else(|| out.join("curve.csv"));
    let mut w = csv_writer(&curve_path)?;
    let err = csv_error(&curve_path);
    w.write_record(["schema_version", "step", "lr", "loss", "grad_norm"]).map_err(&err)?;
    for p in &outcome.curve {
        w.write_record([
            CSV_SCHEMA_VERSION.to_string(),
            p.step.to_string(),
            p.lr.to_string(),
            p.loss.to_string(),
            p.grad_norm.to_string(),
        ])
        .map_err(&err)?;
    }
    flush_csv(w, &curve_path)?;

    let report = TrainReport {
        manifest,
        steps: job.steps,
        final_loss: outcome.curve.last().map_or(f64::NAN, |p| p.loss),
        heldout_loss: outcome.heldout_loss,
        heldout_bits_per_byte: outcome.heldout_bits_per_byte(),
        dense_params: outcome.model.dense_param_count(),
        total_params: outcome.model.total_param_count(),
    };
    write_json(&out.join("train-report.json"), &report)?;
    println!(
        "held-out loss {:.4} nats ({:.4} bits/byte), perplexity {:.3}",
        report.heldout_loss,
        report.heldout_bits_per_byte,
        report.heldout_loss.exp()
    );
    Ok(())
}
