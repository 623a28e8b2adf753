use std::path::PathBuf;

use clap::Args;
use comp_core::scheduler::{calibration_batch, score_layer_blocks, PruneConfig};
use serde::{Deserialize, Serialize};

use super::load_model;
use crate::config::{require, resolve, Flags};
use crate::error::CliError;
use crate::manifest::{
    csv_error, csv_writer, flush_csv, read_bytes, sidecar, write_json, RunManifest, CSV_SCHEMA_VERSION,
};

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Remove the least important layer `n` times, scoring before each.
    #[arg(long)]
    pub iterative: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Layers never removed during `--iterative` (comma list).
    #[arg(long, value_delimiter = ',')]
    pub exempt: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreJob {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub samples: usize,
    pub seq_len: usize,
    pub iterative: usize,
    pub seed: u64,
    pub exempt: Option<Vec<usize>>,
}

impl Default for ScoreJob {
    fn default() -> Self {
        let p = PruneConfig::default();
        Self {
            model: None,
            corpus: None,
            out: None,
            samples: p.samples,
            seq_len: p.seq_len,
            iterative: 0,
            seed: 0,
            exempt: None,
        }
    }
}

pub const HEADER: [&str; 7] = [
    "schema_version",
    "iteration",
    "layer",
    "redundancy",
    "importance",
    "skipped_tokens",
    "removed",
];

pub fn run(a: ScoreArgs) -> Result<(), CliError> {
    let mut f = Flags::default();
    f.set("model", a.model)
        .set("corpus", a.corpus)
        .set("out", a.out)
        .set("samples", a.samples)
        .set("seq_len", a.seq_len)
        .set("iterative", a.iterative)
        .set("seed", a.seed)
        .set("exempt", a.exempt);
    let job: ScoreJob = resolve(a.config.as_deref(), f.into_map())?;
    let model_dir = require(&job.model, "model")?;
    let corpus_path = require(&job.corpus, "corpus")?;
    let out = require(&job.out, "out")?;
    let model = load_model(model_dir)?;
    let corpus = read_bytes(corpus_path)?;
    let mut manifest = RunManifest::new("score-layers", job.seed, &job);
    manifest.add_checkpoint("model", model_dir)?;
    manifest.add_file("corpus", corpus_path)?;

    let cfg = PruneConfig {
        samples: job.samples,
        seq_len: job.seq_len,
        seed: job.seed,
        exempt: job.exempt.clone(),
        ..PruneConfig::default()
    };
    cfg.validate(&model)?;
    let calib = calibration_batch(&corpus, &cfg)?;
    let exempt = cfg.exempt_layers(&model);
    let phase = score_layer_blocks(&model, &calib.sequences, job.iterative, &exempt)?;

    let mut w = csv_writer(out)?;
    let err = csv_error(out);
    w.write_record(HEADER).map_err(&err)?;
    for (it, scores) in phase.history.iter().enumerate() {
        let removed = phase.removed.get(it).copied();
        for s in scores {
            w.write_record([
                CSV_SCHEMA_VERSION.to_string(),
                it.to_string(),
                s.index.to_string(),
                s.redundancy.to_string(),
                s.importance.to_string(),
                s.skipped_tokens.to_string(),
                (removed == Some(s.index)).to_string(),
            ])
            .map_err(&err)?;
        }
    }
    flush_csv(w, out)?;
    write_json(&sidecar(out), &manifest)?;
    for s in phase.history.first().into_iter().flatten() {
        println!("layer {:>2}  redundancy {:.6}  importance {:.6}", s.index, s.redundancy, s.importance);
    }
    Ok(())
}
