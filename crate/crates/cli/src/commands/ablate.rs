use std::path::PathBuf;

use clap::Args;
use comp_core::scheduler::{ablation_identical_input, ablation_iterative_order, EvalMetrics, OrderAblation, PruneReport};
use serde::{Deserialize, Serialize};

use super::load_model;
use super::prune::{KnobArgs, Knobs};
use crate::config::{require, resolve, Flags};
use crate::error::CliError;
use crate::manifest::{
    csv_error, csv_writer, flush_csv, read_bytes, sidecar, write_json, RunManifest, CSV_SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    IterativeOrder,
    IdenticalInput,
}

impl Which {
    pub fn columns(self) -> [&'static str; 2] {
        match self {
            Which::IterativeOrder => ["iterative", "one_shot"],
            Which::IdenticalInput => ["identical", "propagated"],
        }
    }
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub which: Option<Which>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Layers removed (default 4 for iterative-order, 2 for identical-input).
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comparison CSV; manifests and reports go to `<out>.manifest.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: KnobArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateJob {
    pub which: Which,
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ratio: f64,
    pub layers: Option<usize>,
    pub seeds: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub knobs: Knobs,
}

impl Default for AblateJob {
    fn default() -> Self {
        Self {
            which: Which::IdenticalInput,
            model: None,
            corpus: None,
            out: None,
            ratio: 0.3,
            layers: None,
            seeds: 5,
            seed: 0,
            knobs: Knobs::default(),
        }
    }
}

#[derive(Serialize)]
struct Variant<'a> {
    variant: &'static str,
    manifest: RunManifest,
    metrics: EvalMetrics,
    report: Option<&'a PruneReport>,
}

#[derive(Serialize)]
struct SeedRun<'a> {
    seed: u64,
    identical_orders: Option<bool>,
    removed: Option<[&'a [usize]; 2]>,
    a: Variant<'a>,
    b: Variant<'a>,
}

#[derive(Serialize)]
struct AblateFile<'a> {
    manifest: &'a RunManifest,
    runs: Vec<SeedRun<'a>>,
}

enum Outcome {
    Order(OrderAblation),
    Input(Box<(PruneReport, PruneReport)>),
}

pub fn header(which: Which) -> [String; 5] {
    let [a, b] = which.columns();
    [
        "schema_version".into(),
        "seed".into(),
        "metric".into(),
        a.into(),
        b.into(),
    ]
}

pub fn run(a: AblateArgs) -> Result<(), CliError> {
    let mut f = Flags::default();
    f.set("which", a.which)
        .set("model", a.model)
        .set("corpus", a.corpus)
        .set("out", a.out)
        .set("ratio", a.ratio)
        .set("layers", a.layers)
        .set("seeds", a.seeds)
        .set("seed", a.seed);
    a.knobs.apply(&mut f);
    let mut job: AblateJob = resolve(a.config.as_deref(), f.into_map())?;
    job.layers.get_or_insert(match job.which {
        Which::IterativeOrder => 4,
        Which::IdenticalInput => 2,
    });
    let layers = job.layers.expect("resolved above");
    let model_dir = require(&job.model, "model")?;
    let corpus_path = require(&job.corpus, "corpus")?;
    let out = require(&job.out, "out")?;
    if job.seeds == 0 {
        return Err(CliError::Usage("ablate needs at least one seed".into()));
    }
    let model = load_model(model_dir)?;
    let corpus = read_bytes(corpus_path)?;
    let mut manifest = RunManifest::new("ablate", job.seed, &job);
    manifest.add_checkpoint("model", model_dir)?;
    manifest.add_file("corpus", corpus_path)?;

    let mut outcomes = Vec::with_capacity(job.seeds);
    for s in 0..job.seeds as u64 {
        let seed = job.seed + s;
        let cfg = job.knobs.config(job.ratio, layers, seed);
        let o = match job.which {
            Which::IterativeOrder => Outcome::Order(ablation_iterative_order(&model, &corpus, &cfg)?),
            Which::IdenticalInput => {
                let (x, y) = ablation_identical_input(&model, &corpus, &cfg).map_err(|f| CliError::Core(f.error))?;
                Outcome::Input(Box::new((x.report, y.report)))
            }
        };
        eprintln!("seed {seed} done");
        outcomes.push((seed, cfg, o));
    }

    let [name_a, name_b] = job.which.columns();
    let mut runs = Vec::new();
    let mut rows: Vec<(String, &'static str, String, String)> = Vec::new();
    let mut sums = [[0.0f64; 2]; 3];
    for (seed, cfg, o) in &outcomes {
        let variant_manifest = |name: &str, cfg: &comp_core::scheduler::PruneConfig| {
            let mut m = manifest.clone();
            m.command = format!("ablate/{name}");
            m.seed = *seed;
            m.config = serde_json::to_value(cfg).expect("config serializes");
            m
        };
        let (ma, mb, run) = match o {
            Outcome::Order(ab) => {
                let mut ca = cfg.clone();
                ca.layer_order = comp_core::scheduler::LayerOrder::Iterative;
                let mut cb = cfg.clone();
                cb.layer_order = comp_core::scheduler::LayerOrder::OneShot;
                rows.push((seed.to_string(), "identical_orders", ab.identical_orders.to_string(), ab.identical_orders.to_string()));
                let run = SeedRun {
                    seed: *seed,
                    identical_orders: Some(ab.identical_orders),
                    removed: Some([&ab.iterative_order, &ab.one_shot_order]),
                    a: Variant {
                        variant: name_a,
                        manifest: variant_manifest(name_a, &ca),
                        metrics: ab.iterative,
                        report: None,
                    },
                    b: Variant {
                        variant: name_b,
                        manifest: variant_manifest(name_b, &cb),
                        metrics: ab.one_shot,
                        report: None,
                    },
                };
                (ab.iterative, ab.one_shot, run)
            }
            Outcome::Input(pair) => {
                let (ra, rb) = (&pair.0, &pair.1);
                let (xa, xb) = (ra.metrics.expect("complete run"), rb.metrics.expect("complete run"));
                let run = SeedRun {
                    seed: *seed,
                    identical_orders: None,
                    removed: None,
                    a: Variant {
                        variant: name_a,
                        manifest: variant_manifest(name_a, &ra.config),
                        metrics: xa,
                        report: Some(ra),
                    },
                    b: Variant {
                        variant: name_b,
                        manifest: variant_manifest(name_b, &rb.config),
                        metrics: xb,
                        report: Some(rb),
                    },
                };
                (xa, xb, run)
            }
        };
        for (k, (metric, va, vb)) in [
            ("perplexity", ma.perplexity_after, mb.perplexity_after),
            ("kl", ma.kl, mb.kl),
            ("logit_mse", ma.logit_mse, mb.logit_mse),
        ]
        .into_iter()
        .enumerate()
        {
            sums[k][0] += va;
            sums[k][1] += vb;
            rows.push((seed.to_string(), metric, va.to_string(), vb.to_string()));
        }
        runs.push(run);
    }
    let n = outcomes.len() as f64;
    for (k, metric) in ["perplexity", "kl", "logit_mse"].into_iter().enumerate() {
        rows.push(("mean".into(), metric, (sums[k][0] / n).to_string(), (sums[k][1] / n).to_string()));
    }

    let mut w = csv_writer(out)?;
    let err = csv_error(out);
    w.write_record(header(job.which)).map_err(&err)?;
    for (seed, metric, va, vb) in &rows {
        w.write_record([CSV_SCHEMA_VERSION.to_string(), seed.clone(), metric.to_string(), va.clone(), vb.clone()])
            .map_err(&err)?;
    }
    flush_csv(w, out)?;
    println!(
        "mean perplexity: {name_a} {:.4}, {name_b} {:.4}",
        sums[0][0] / n,
        sums[0][1] / n
    );
    write_json(&sidecar(out), &AblateFile { manifest: &manifest, runs })?;
    Ok(())
}
