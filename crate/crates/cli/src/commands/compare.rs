use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use comp_core::scheduler::{prune, PruneReport, Strategy};
use comp_core::Model;
use serde::{Deserialize, Serialize};

use super::load_model;
use super::prune::{KnobArgs, Knobs};
use crate::config::{require, resolve, Flags};
use crate::error::{core_exit_code, CliError};
use crate::manifest::{
    csv_error, csv_writer, flush_csv, read_bytes, sidecar, write_json, RunManifest, CSV_SCHEMA_VERSION,
};

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma list of target ratios.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    /// Comma list of comp, layer, neuron.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    pub strategies: Option<Vec<Strategy>>,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Most layers COMP removes; capped per ratio at ⌊r·L⌋.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Long-form CSV; per-cell reports go to `<out>.manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: KnobArgs,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s.trim() {
        "comp" => Ok(Strategy::Comp),
        "layer" => Ok(Strategy::Layer),
        "neuron" => Ok(Strategy::Neuron),
        other => Err(format!("unknown strategy `{other}`")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareJob {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ratios: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub seeds: usize,
    pub seed: u64,
    pub layers: usize,
    pub jobs: usize,
    #[serde(flatten)]
    pub knobs: Knobs,
}

impl Default for CompareJob {
    fn default() -> Self {
        Self {
            model: None,
            corpus: None,
            out: None,
            ratios: vec![0.1, 0.2, 0.3],
            strategies: vec![Strategy::Comp, Strategy::Layer, Strategy::Neuron],
            seeds: 5,
            seed: 0,
            layers: 2,
            jobs: 1,
            knobs: Knobs::default(),
        }
    }
}

pub const HEADER: [&str; 15] = [
    "schema_version",
    "row_kind",
    "strategy",
    "ratio",
    "seed",
    "layers",
    "status",
    "exit_code",
    "achieved_ratio",
    "shortfall_params",
    "perplexity_before",
    "perplexity",
    "kl",
    "logit_mse",
    "error",
];

#[derive(Debug, Clone, Serialize)]
pub struct Cell {
    pub strategy: Strategy,
    pub ratio: f64,
    pub seed: u64,
    pub layers: usize,
    pub exit_code: i32,
    pub error: Option<String>,
    pub report: Option<PruneReport>,
}

/// Layers COMP removes at ratio `r`: never more than fit in the budget.
pub fn layers_for_ratio(model: &Model, ratio: f64, max_layers: usize) -> usize {
    ((ratio * model.n_layers() as f64) + 1e-9).floor().max(0.0).min(max_layers as f64) as usize
}

pub fn run_cell(model: &Model, corpus: &[u8], knobs: &Knobs, strategy: Strategy, ratio: f64, seed: u64, max_layers: usize) -> Cell {
    let layers = match strategy {
        Strategy::Comp => layers_for_ratio(model, ratio, max_layers),
        _ => 0,
    };
    let cfg = knobs.config(ratio, layers, seed);
    match prune(model, corpus, strategy, &cfg) {
        Ok(o) => Cell {
            strategy,
            ratio,
            seed,
            layers,
            exit_code: 0,
            error: None,
            report: Some(o.report),
        },
        Err(f) => Cell {
            strategy,
            ratio,
            seed,
            layers,
            exit_code: core_exit_code(&f.error),
            error: Some(f.error.to_string()),
            report: Some(*f.report),
        },
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct CompareFile<'a> {
    manifest: &'a RunManifest,
    cells: &'a [Cell],
}

pub fn run(a: CompareArgs) -> Result<(), CliError> {
    let mut f = Flags::default();
    f.set("model", a.model)
        .set("corpus", a.corpus)
        .set("out", a.out)
        .set("ratios", a.ratios)
        .set("strategies", a.strategies)
        .set("seeds", a.seeds)
        .set("seed", a.seed)
        .set("layers", a.layers)
        .set("jobs", a.jobs);
    a.knobs.apply(&mut f);
    let job: CompareJob = resolve(a.config.as_deref(), f.into_map())?;
    let model_dir = require(&job.model, "model")?;
    let corpus_path = require(&job.corpus, "corpus")?;
    let out = require(&job.out, "out")?;
    if job.ratios.is_empty() || job.strategies.is_empty() || job.seeds == 0 {
        return Err(CliError::Usage("compare needs at least one ratio, strategy and seed".into()));
    }
    let model = load_model(model_dir)?;
    let corpus = read_bytes(corpus_path)?;
    let mut manifest = RunManifest::new("compare", job.seed, &job);
    manifest.add_checkpoint("model", model_dir)?;
    manifest.add_file("corpus", corpus_path)?;

    let mut grid = Vec::new();
    for &ratio in &job.ratios {
        for &strategy in &job.strategies {
            for s in 0..job.seeds as u64 {
                grid.push((strategy, ratio, job.seed + s));
            }
        }
    }
    let slots: Vec<Mutex<Option<Cell>>> = grid.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..job.jobs.max(1).min(grid.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(strategy, ratio, seed)) = grid.get(i) else { break };
                let cell = run_cell(&model, &corpus, &job.knobs, strategy, ratio, seed, job.layers);
                eprintln!(
                    "cell {}/{}: {} r={ratio} seed={seed} {}",
                    i + 1,
                    grid.len(),
                    strategy.name(),
                    cell.error.as_deref().unwrap_or("ok")
                );
                *slots[i].lock().expect("cell slot") = Some(cell);
            });
        }
    });
    let cells: Vec<Cell> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("cell slot").expect("every cell ran"))
        .collect();

    let mut w = csv_writer(out)?;
    let err = csv_error(out);
    w.write_record(HEADER).map_err(&err)?;
    for c in &cells {
        let r = c.report.as_ref();
        let m = r.and_then(|r| r.metrics);
        w.write_record([
            CSV_SCHEMA_VERSION.to_string(),
            "cell".into(),
            c.strategy.name().into(),
            c.ratio.to_string(),
            c.seed.to_string(),
            c.layers.to_string(),
            if c.error.is_some() { "error".into() } else { "ok".into() },
            c.exit_code.to_string(),
            fmt_opt(r.map(|r| r.achieved_ratio)),
            fmt_opt(r.and_then(|r| r.shortfall.as_ref()).map(|s| s.missing_params)),
            fmt_opt(m.map(|m| m.perplexity_before)),
            fmt_opt(m.map(|m| m.perplexity_after)),
            fmt_opt(m.map(|m| m.kl)),
            fmt_opt(m.map(|m| m.logit_mse)),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(&err)?;
    }
    for &ratio in &job.ratios {
        for &strategy in &job.strategies {
            let ok: Vec<&Cell> = cells
                .iter()
                .filter(|c| c.strategy == strategy && c.ratio == ratio && c.error.is_none())
                .collect();
            let mean = |get: &dyn Fn(&PruneReport) -> Option<f64>| -> Option<f64> {
                let vals: Vec<f64> = ok.iter().filter_map(|c| c.report.as_ref().and_then(get)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            let total = cells.iter().filter(|c| c.strategy == strategy && c.ratio == ratio).count();
            w.write_record([
                CSV_SCHEMA_VERSION.to_string(),
                "summary".into(),
                strategy.name().into(),
                ratio.to_string(),
                String::new(),
                String::new(),
                format!("{}/{} ok", ok.len(), total),
                String::new(),
                fmt_opt(mean(&|r| Some(r.achieved_ratio))),
                String::new(),
                fmt_opt(mean(&|r| r.metrics.map(|m| m.perplexity_before))),
                fmt_opt(mean(&|r| r.metrics.map(|m| m.perplexity_after))),
                fmt_opt(mean(&|r| r.metrics.map(|m| m.kl))),
                fmt_opt(mean(&|r| r.metrics.map(|m| m.logit_mse))),
                String::new(),
            ])
            .map_err(&err)?;
            if let Some(p) = mean(&|r| r.metrics.map(|m| m.perplexity_after)) {
                println!("{:<6} r={ratio:<5} mean perplexity {p:.4}", strategy.name());
            }
        }
    }
    flush_csv(w, out)?;
    write_json(
        &sidecar(out),
        &CompareFile {
            manifest: &manifest,
            cells: &cells,
        },
    )?;
    Ok(())
}
