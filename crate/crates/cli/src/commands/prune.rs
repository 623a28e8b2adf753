use std::path::{Path, PathBuf};

use clap::Args;
use comp_core::importance::EpsilonRule;
use comp_core::masktune::Solver;
use comp_core::model::save_checkpoint;
use comp_core::scheduler::{
    prune, DenseReport, InputPolicy, LayerOrder, PruneConfig, PruneReport, Strategy,
};
use serde::{Deserialize, Serialize};

use super::load_model;
use crate::config::{require, resolve, Flags};
use crate::error::{core_exit_code, CliError};
use crate::manifest::{csv_error, csv_writer, flush_csv, read_bytes, write_json, RunManifest, CSV_SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum StrategyArg {
    Comp,
    Layer,
    Neuron,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Comp => Strategy::Comp,
            StrategyArg::Layer => Strategy::Layer,
            StrategyArg::Neuron => Strategy::Neuron,
        }
    }
}

/// Pruning knobs shared by prune, compare and ablate.
#[derive(Args, Debug, Default)]
pub struct KnobArgs {
    /// Relative ridge factor: ε = max(factor · trace(AᵀA)/q, floor).
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub epsilon_floor: Option<f64>,
    #[arg(long)]
    pub var_step: Option<f64>,
    #[arg(long)]
    pub neuron_step: Option<usize>,
    /// Original layer indices kept intact (comma list).
    #[arg(long, value_delimiter = ',')]
    pub exempt: Option<Vec<usize>>,
    #[arg(long)]
    pub cap: Option<f64>,
    #[arg(long, value_parser = ["direct", "iterative"])]
    pub solver: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, value_parser = ["identical", "propagated"])]
    pub input_policy: Option<String>,
    #[arg(long, value_parser = ["iterative", "one-shot"])]
    pub layer_order: Option<String>,
    #[arg(long)]
    pub recompute_importance: bool,
    #[arg(long)]
    pub eval_tokens: Option<usize>,
}

impl KnobArgs {
    pub fn apply(self, f: &mut Flags) {
        f.set("epsilon", self.epsilon)
            .set("epsilon_floor", self.epsilon_floor)
            .set("var_step", self.var_step)
            .set("neuron_step", self.neuron_step)
            .set("exempt", self.exempt)
            .set("cap", self.cap)
            .set("solver", self.solver)
            .set("samples", self.samples)
            .set("seq_len", self.seq_len)
            .set("input_policy", self.input_policy)
            .set("layer_order", self.layer_order)
            .flag("recompute_importance", self.recompute_importance)
            .set("eval_tokens", self.eval_tokens);
    }
}

/// Resolved knob values; flattened into each job config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    pub epsilon: f64,
    pub epsilon_floor: f64,
    pub var_step: f64,
    pub neuron_step: Option<usize>,
    pub exempt: Option<Vec<usize>>,
    pub cap: f64,
    pub solver: Solver,
    pub samples: usize,
    pub seq_len: usize,
    pub input_policy: InputPolicy,
    pub layer_order: LayerOrder,
    pub recompute_importance: bool,
    pub eval_tokens: usize,
}

impl Default for Knobs {
    fn default() -> Self {
        let p = PruneConfig::default();
        Self {
            epsilon: p.epsilon.relative,
            epsilon_floor: p.epsilon.floor,
            var_step: p.var_step,
            neuron_step: p.neuron_step,
            exempt: p.exempt,
            cap: p.cap,
            solver: p.solver,
            samples: p.samples,
            seq_len: p.seq_len,
            input_policy: p.input_policy,
            layer_order: p.layer_order,
            recompute_importance: p.recompute_importance,
            eval_tokens: p.eval_tokens,
        }
    }
}

impl Knobs {
    pub fn config(&self, ratio: f64, layers: usize, seed: u64) -> PruneConfig {
        PruneConfig {
            ratio,
            layers,
            epsilon: EpsilonRule {
                relative: self.epsilon,
                floor: self.epsilon_floor,
            },
            var_step: self.var_step,
            neuron_step: self.neuron_step,
            exempt: self.exempt.clone(),
            cap: self.cap,
            solver: self.solver,
            seed,
            samples: self.samples,
            seq_len: self.seq_len,
            input_policy: self.input_policy,
            layer_order: self.layer_order,
            recompute_importance: self.recompute_importance,
            eval_tokens: self.eval_tokens,
        }
    }
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pruned checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report (default `<out>/prune-report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-dense CSV (default `<out>/denses.csv`).
    #[arg(long)]
    pub detail: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: KnobArgs,
}

// Unknown keys are rejected by the overlay; serde cannot deny them through
// a flattened field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneJob {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub detail: Option<PathBuf>,
    pub strategy: Strategy,
    pub ratio: f64,
    pub layers: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub knobs: Knobs,
}

impl Default for PruneJob {
    fn default() -> Self {
        let p = PruneConfig::default();
        Self {
            model: None,
            corpus: None,
            out: None,
            report: None,
            detail: None,
            strategy: Strategy::Comp,
            ratio: p.ratio,
            layers: p.layers,
            seed: p.seed,
            knobs: Knobs::default(),
        }
    }
}

#[derive(Serialize)]
pub struct ReportFile<'a> {
    pub manifest: &'a RunManifest,
    pub report: &'a PruneReport,
}

pub const DENSE_HEADER: [&str; 16] = [
    "schema_version",
    "layer",
    "dense",
    "out_dim",
    "in_dim",
    "pruned",
    "pruned_fraction",
    "final_v_t",
    "variance",
    "reconstruction_rms",
    "untuned_rms",
    "kappa0",
    "epsilon",
    "fd_fallback",
    "solver_fallback",
    "solver_iterations",
];

pub fn write_dense_csv(path: &Path, denses: &[DenseReport]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let err = csv_error(path);
    w.write_record(DENSE_HEADER).map_err(&err)?;
    for d in denses {
        w.write_record([
            CSV_SCHEMA_VERSION.to_string(),
            d.layer.to_string(),
            d.kind.name().to_string(),
            d.out_dim.to_string(),
            d.in_dim.to_string(),
            d.pruned.to_string(),
            d.pruned_fraction.to_string(),
            d.final_v_t.to_string(),
            d.variance.to_string(),
            d.reconstruction_rms.to_string(),
            d.untuned_rms.to_string(),
            d.kappa0.to_string(),
            d.epsilon.to_string(),
            d.fd_fallback.to_string(),
            d.solver_fallback.to_string(),
            d.solver_iterations.to_string(),
        ])
        .map_err(&err)?;
    }
    flush_csv(w, path)
}

pub fn run(a: PruneArgs) -> Result<(), CliError> {
    let mut f = Flags::default();
    f.set("model", a.model)
        .set("corpus", a.corpus)
        .set("out", a.out)
        .set("report", a.report)
        .set("detail", a.detail)
        .set("strategy", a.strategy.map(Strategy::from))
        .set("ratio", a.ratio)
        .set("layers", a.layers)
        .set("seed", a.seed);
    a.knobs.apply(&mut f);
    let job: PruneJob = resolve(a.config.as_deref(), f.into_map())?;
    let model_dir = require(&job.model, "model")?;
    let corpus_path = require(&job.corpus, "corpus")?;
    let out = require(&job.out, "out")?;
    let report_path = job.report.clone().unwrap_or_else(|| out.join("prune-report.json"));
    let detail_path = job.detail.clone().unwrap_or_else(|| out.join("denses.csv"));

    let model = load_model(model_dir)?;
    let corpus = read_bytes(corpus_path)?;
    let mut manifest = RunManifest::new("prune", job.seed, &job);
    manifest.add_checkpoint("model", model_dir)?;
    manifest.add_file("corpus", corpus_path)?;

    let cfg = job.knobs.config(job.ratio, job.layers, job.seed);
    match prune(&model, &corpus, job.strategy, &cfg) {
        Ok(outcome) => {
            for (phase, secs) in &outcome.timings {
                eprintln!("{phase}: {secs:.2}s");
            }
            std::fs::create_dir_all(out).map_err(CliError::io(out))?;
            save_checkpoint(&outcome.model, out)?;
            write_json(
                &report_path,
                &ReportFile {
                    manifest: &manifest,
                    report: &outcome.report,
                },
            )?;
            write_dense_csv(&detail_path, &outcome.report.denses)?;
            let r = &outcome.report;
            println!(
                "{}: removed layers {:?}, achieved ratio {:.4} (target {:.4}){}",
                r.strategy.name(),
                r.removed_layers,
                r.achieved_ratio,
                cfg.ratio,
                if r.shortfall.is_some() { ", shortfall" } else { "" }
            );
            if let Some(m) = r.metrics {
                println!(
                    "perplexity {:.4} -> {:.4}, KL {:.6}, logit MSE {:.6}",
                    m.perplexity_before, m.perplexity_after, m.kl, m.logit_mse
                );
            }
            Ok(())
        }
        Err(failure) => {
            write_json(
                &report_path,
                &ReportFile {
                    manifest: &manifest,
                    report: &failure.report,
                },
            )?;
            eprintln!(
                "partial report written to {} (exit {})",
                report_path.display(),
                core_exit_code(&failure.error)
            );
            Err(CliError::Core(failure.error))
        }
    }
}
