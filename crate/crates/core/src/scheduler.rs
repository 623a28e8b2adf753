//! The hybrid pruning pipeline and its single-granularity baselines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::importance::{rank_neurons, score_dense, score_layers, EpsilonRule, LayerScore};
use crate::masktune::{Solver, TuneResult, TuneSystem};
use crate::model::kernels::log_sum_exp;
use crate::model::{
    byte_tokenize, ActivationTrace, CorpusSplit, DenseKind, LayerTrace, Model, TokenBatch,
    TransformerLayer,
};
use crate::{Error, Result, Vector};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Comp,
    Layer,
    Neuron,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Comp => "comp",
            Strategy::Layer => "layer",
            Strategy::Neuron => "neuron",
        }
    }
}

/// Where dense inputs for importance and tuning come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputPolicy {
    /// One capture of the original model, for every layer.
    Identical,
    /// Re-captured from the partially pruned model before each layer; the
    /// original model's dense outputs stay the reconstruction target.
    Propagated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerOrder {
    /// Re-score after every removal.
    Iterative,
    /// Score once, remove the lowest `n`.
    OneShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Target fraction of dense parameters to remove.
    pub ratio: f64,
    /// Layers removed in the layer phase.
    pub layers: usize,
    pub epsilon: EpsilonRule,
    pub var_step: f64,
    /// `None` means `max(1, ⌊q/64⌋)` per dense.
    pub neuron_step: Option<usize>,
    /// Original layer indices never removed or neuron-pruned. `None` means
    /// the first two and the last layer.
    pub exempt: Option<Vec<usize>>,
    /// Per-dense prune cap as a fraction of its inputs.
    pub cap: f64,
    pub solver: Solver,
    pub seed: u64,
    pub samples: usize,
    pub seq_len: usize,
    pub input_policy: InputPolicy,
    pub layer_order: LayerOrder,
    /// Recompute neuron importance after every growth step instead of
    /// following the ranking taken at the unpruned mask.
    pub recompute_importance: bool,
    /// Held-out tokens used for perplexity and fidelity.
    pub eval_tokens: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            ratio: 0.3,
            layers: 1,
            epsilon: EpsilonRule::default(),
            var_step: 1e-3,
            neuron_step: None,
            exempt: None,
            cap: 0.95,
            solver: Solver::Direct,
            seed: 0,
            samples: 10,
            seq_len: 128,
            input_policy: InputPolicy::Identical,
            layer_order: LayerOrder::Iterative,
            recompute_importance: false,
            eval_tokens: 8192,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.ratio) {
            return fail(format!("ratio must be in [0, 1), got {}", self.ratio));
        }
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return fail(format!("cap must be in (0, 1], got {}", self.cap));
        }
        if !(self.var_step > 0.0 && self.var_step.is_finite()) {
            return fail(format!("var_step must be positive, got {}", self.var_step));
        }
        if self.neuron_step == Some(0) {
            return fail("neuron_step must be at least 1".into());
        }
        if !(self.epsilon.relative >= 0.0 && self.epsilon.floor > 0.0) {
            return fail("epsilon floor must be positive and relative non-negative".into());
        }
        if self.samples == 0 || self.seq_len < 2 || self.seq_len > model.config.max_seq {
            return fail(format!(
                "calibration needs samples ≥ 1 and seq_len in 2..={}",
                model.config.max_seq
            ));
        }
        if let Some(ex) = &self.exempt {
            if let Some(bad) = ex.iter().find(|&&i| i >= model.n_layers()) {
                return fail(format!("exempt layer {bad} does not exist"));
            }
        }
        Ok(())
    }

    /// Resolved exemption list, sorted.
    pub fn exempt_layers(&self, model: &Model) -> Vec<usize> {
        let mut ex = match &self.exempt {
            Some(v) => v.clone(),
            None => {
                let indices: Vec<usize> = model.layers.iter().map(|l| l.index).collect();
                let mut v = indices.iter().take(2).copied().collect::<Vec<_>>();
                v.extend(indices.last().copied());
                v
            }
        };
        ex.sort_unstable();
        ex.dedup();
        ex
    }

    fn neuron_step_for(&self, q: usize) -> usize {
        self.neuron_step.unwrap_or((q / 64).max(1))
    }
}

pub fn calibration_batch(corpus: &[u8], cfg: &PruneConfig) -> Result<TokenBatch> {
    let split = CorpusSplit::new(corpus);
    Ok(byte_tokenize(split.train, cfg.seq_len, cfg.samples, cfg.seed)?)
}

pub fn evaluation_batch(corpus: &[u8], model: &Model, max_tokens: usize) -> TokenBatch {
    let split = CorpusSplit::new(corpus);
    TokenBatch::contiguous(split.heldout, model.config.max_seq, max_tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPhase {
    /// Original indices in removal order.
    pub removed: Vec<usize>,
    /// Score vector of every iteration (a single entry for one-shot).
    pub history: Vec<Vec<LayerScore>>,
}

/// Removes `n` layers by lowest importance, skipping `exempt`.
pub fn iterative_layer_prune(
    model: &mut Model,
    calib: &[Vec<u32>],
    n: usize,
    exempt: &[usize],
    order: LayerOrder,
) -> Result<LayerPhase> {
    let removable = model.layers.iter().filter(|l| !exempt.contains(&l.index)).count();
    if n > removable {
        return Err(Error::Config(format!(
            "cannot remove {n} layers: only {removable} are not exempt"
        )));
    }
    let mut phase = LayerPhase {
        removed: Vec::with_capacity(n),
        history: Vec::new(),
    };
    if n == 0 {
        return Ok(phase);
    }
    let pick_lowest = |scores: &[LayerScore], skip: &[usize]| -> Vec<usize> {
        let mut cand: Vec<&LayerScore> = scores
            .iter()
            .filter(|s| !exempt.contains(&s.index) && !skip.contains(&s.index))
            .collect();
        cand.sort_by(|a, b| a.importance.total_cmp(&b.importance).then(a.index.cmp(&b.index)));
        cand.into_iter().map(|s| s.index).collect()
    };
    match order {
        LayerOrder::Iterative => {
            for _ in 0..n {
                let (_, trace) = model.forward_capture(calib, false)?;
                let scores = score_layers(&trace)?;
                let victim = pick_lowest(&scores, &[])[0];
                phase.history.push(scores);
                let pos = model.position_of(victim).expect("scored layer exists");
                model.remove_layer(pos)?;
                phase.removed.push(victim);
            }
        }
        LayerOrder::OneShot => {
            let (_, trace) = model.forward_capture(calib, false)?;
            let scores = score_layers(&trace)?;
            let victims: Vec<usize> = pick_lowest(&scores, &[]).into_iter().take(n).collect();
            phase.history.push(scores);
            for victim in victims {
                let pos = model.position_of(victim).expect("scored layer exists");
                model.remove_layer(pos)?;
                phase.removed.push(victim);
            }
        }
    }
    Ok(phase)
}

/// Input to the ratio allocation for one remaining, non-exempt layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationInput {
    pub index: usize,
    pub importance: f64,
    /// Dense parameter count `N̂_l`.
    pub params: usize,
    /// Parameters prunable under the per-dense cap.
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub index: usize,
    pub importance: f64,
    pub weight: f64,
    pub ratio: f64,
    pub budget: f64,
    pub capacity: usize,
    pub clipped: bool,
}

/// Floor applied to layer importance before inversion.
pub const MIN_IMPORTANCE: f64 = 1e-12;

/// Splits `budget` across layers in proportion to inverse importance,
/// clipping at capacity and redistributing the excess.
pub fn allocate_ratios(entries: &[AllocationInput], budget: f64) -> Result<Vec<PlanEntry>> {
    let budget = if budget.abs() < 0.5 { 0.0 } else { budget };
    if budget < 0.0 {
        return Err(Error::Infeasible(format!(
            "layer phase already exceeds the target by {:.0} parameters; lower the layer count or raise the ratio",
            -budget
        )));
    }
    let total_cap: usize = entries.iter().map(|e| e.capacity).sum();
    if budget > total_cap as f64 + 1e-9 {
        return Err(Error::Infeasible(format!(
            "neuron budget {budget:.0} exceeds the {total_cap} prunable parameters of the remaining layers; raise the layer count or lower the ratio"
        )));
    }
    let inv: Vec<f64> = entries.iter().map(|e| 1.0 / e.importance.max(MIN_IMPORTANCE)).collect();
    let inv_sum: f64 = inv.iter().sum();
    let weights: Vec<f64> = inv.iter().map(|v| v / inv_sum).collect();
    let mut budgets = vec![0.0; entries.len()];
    let mut clipped = vec![false; entries.len()];
    let mut remaining = budget;
    loop {
        let free_w: f64 = (0..entries.len()).filter(|&i| !clipped[i]).map(|i| weights[i]).sum();
        if free_w <= 0.0 || remaining <= 0.0 {
            break;
        }
        let mut newly = false;
        for i in 0..entries.len() {
            if !clipped[i] {
                budgets[i] = remaining * weights[i] / free_w;
                if budgets[i] > entries[i].capacity as f64 {
                    newly = true;
                }
            }
        }
        if !newly {
            break;
        }
        for i in 0..entries.len() {
            if !clipped[i] && budgets[i] > entries[i].capacity as f64 {
                clipped[i] = true;
                budgets[i] = entries[i].capacity as f64;
            }
        }
        remaining = budget
            - (0..entries.len())
                .filter(|&i| clipped[i])
                .map(|i| budgets[i])
                .sum::<f64>();
    }
    Ok(entries
        .iter()
        .enumerate()
        .map(|(i, e)| PlanEntry {
            index: e.index,
            importance: e.importance,
            weight: weights[i],
            ratio: budgets[i] / e.params.max(1) as f64,
            budget: budgets[i],
            capacity: e.capacity,
            clipped: clipped[i],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseReport {
    pub layer: usize,
    pub kind: DenseKind,
    pub out_dim: usize,
    pub in_dim: usize,
    pub pruned: usize,
    pub pruned_fraction: f64,
    /// Threshold in force at the last growth step (0 when never grown).
    pub final_v_t: f64,
    pub variance: f64,
    pub reconstruction_rms: f64,
    /// Same masks without tuning (`m̂ = m`).
    pub untuned_rms: f64,
    pub kappa0: f64,
    pub epsilon: f64,
    pub fd_fallback: bool,
    pub solver_fallback: bool,
    pub solver_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub index: usize,
    pub budget: f64,
    pub pruned_params: usize,
    /// Every dense hit its cap before the budget was met.
    pub shortfall: bool,
    pub rounds: usize,
}

struct DenseState<'a> {
    kind: DenseKind,
    p: usize,
    q: usize,
    cap: usize,
    step: usize,
    ranking: Vec<usize>,
    mask: Vec<bool>,
    pruned: usize,
    system: TuneSystem<'a>,
    result: TuneResult,
    v_t: f64,
    kappa0: f64,
    epsilon: f64,
    fd_fallback: bool,
    solver_fallback: bool,
    x_mean: Vec<f64>,
}

fn dense_inputs<'t>(trace: &'t LayerTrace, kind: DenseKind) -> Result<&'t crate::Matrix> {
    trace
        .dense_input(kind)
        .ok_or_else(|| Error::DegenerateTrace(format!("layer {} trace lacks dense inputs", trace.index)))
}

fn identity_result(system: &TuneSystem<'_>, q: usize) -> TuneResult {
    let ones = vec![1.0; q];
    TuneResult {
        residual: system.rms(&ones),
        tuned: Vector(ones),
        variance: 0.0,
        solver_iterations: 0,
        solver: Solver::Direct,
        fell_back: false,
    }
}

fn with_dense_context(kind: DenseKind, index: usize, e: Error) -> Error {
    match e {
        Error::Solver { dense, source } => Error::Solver {
            dense: format!("layer {index} {} ({dense})", kind.name()),
            source,
        },
        Error::Linalg(source) => Error::Solver {
            dense: format!("layer {index} {}", kind.name()),
            source,
        },
        other => other,
    }
}

/// Grows each dense's pruned set under a rising variance threshold until the
/// layer's parameter budget is met. Masks are installed into `layer`.
pub fn prune_layer_neurons(
    layer: &mut TransformerLayer,
    inputs: &LayerTrace,
    targets: Option<&LayerTrace>,
    budget: f64,
    cfg: &PruneConfig,
) -> Result<(LayerOutcome, Vec<DenseReport>)> {
    let index = layer.index;
    let kinds: Vec<DenseKind> = layer.denses.iter().map(|d| d.kind).collect();
    let snapshot = layer.clone();
    let mut states = Vec::with_capacity(kinds.len());
    for (k, &kind) in kinds.iter().enumerate() {
        let dense = &snapshot.denses[k];
        let x = dense_inputs(inputs, kind)?;
        let target = match targets {
            Some(t) => Some(dense_inputs(t, kind)?),
            None => None,
        };
        let x_mean = crate::model::column_mean(x);
        let scores = score_dense(dense, &x_mean, cfg.epsilon).map_err(|e| with_dense_context(kind, index, e))?;
        let system = TuneSystem::new(&dense.weight, x, target, scores.epsilon)
            .map_err(|e| with_dense_context(kind, index, e))?;
        let (p, q) = (dense.out_dim(), dense.in_dim());
        let result = identity_result(&system, q);
        states.push(DenseState {
            kind,
            p,
            q,
            cap: ((cfg.cap * q as f64).floor() as usize).min(q.saturating_sub(1)),
            step: cfg.neuron_step_for(q),
            ranking: rank_neurons(&scores),
            mask: vec![true; q],
            pruned: 0,
            system,
            result,
            v_t: 0.0,
            kappa0: scores.kappa0,
            epsilon: scores.epsilon,
            fd_fallback: scores.fallback,
            solver_fallback: false,
            x_mean,
        });
    }

    let target = budget.max(0.0);
    let mut pruned_params = 0usize;
    let mut v_t = 0.0;
    let mut rounds = 0usize;
    let mut shortfall = false;
    while (pruned_params as f64) < target {
        v_t += cfg.var_step;
        rounds += 1;
        let mut progressed = false;
        for st in states.iter_mut() {
            while st.result.variance < v_t && st.pruned < st.cap && (pruned_params as f64) < target {
                let remaining = target - pruned_params as f64;
                let need = (remaining / st.p as f64).ceil() as usize;
                let step = st.step.min(st.cap - st.pruned).min(need.max(1));
                let next: Vec<usize> = if cfg.recompute_importance && st.pruned > 0 {
                    let mut d = snapshot.dense(st.kind).clone();
                    d.mask = st.mask.clone();
                    let s = score_dense(&d, &st.x_mean, cfg.epsilon)
                        .map_err(|e| with_dense_context(st.kind, index, e))?;
                    rank_neurons(&s).into_iter().take(step).collect()
                } else {
                    st.ranking[st.pruned..st.pruned + step].to_vec()
                };
                for j in next {
                    st.mask[j] = false;
                }
                st.pruned += step;
                st.result = st
                    .system
                    .solve(&st.mask, cfg.solver)
                    .map_err(|e| with_dense_context(st.kind, index, e))?;
                st.solver_fallback |= st.result.fell_back;
                st.v_t = v_t;
                pruned_params += step * st.p;
                progressed = true;
            }
        }
        if (pruned_params as f64) >= target {
            break;
        }
        let growable: Vec<&DenseState> = states.iter().filter(|s| s.pruned < s.cap).collect();
        if growable.is_empty() {
            shortfall = true;
            break;
        }
        if !progressed {
            // Skip rounds in which no dense could grow.
            let min_var = growable
                .iter()
                .map(|s| s.result.variance)
                .fold(f64::INFINITY, f64::min);
            let skip = ((min_var - v_t) / cfg.var_step).floor().max(0.0);
            v_t += skip * cfg.var_step;
        }
    }

    let mut reports = Vec::with_capacity(states.len());
    for st in &states {
        let untuned: Vec<f64> = st.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let untuned_rms = st.system.rms(&untuned);
        reports.push(DenseReport {
            layer: index,
            kind: st.kind,
            out_dim: st.p,
            in_dim: st.q,
            pruned: st.pruned,
            pruned_fraction: st.pruned as f64 / st.q as f64,
            final_v_t: st.v_t,
            variance: st.result.variance,
            reconstruction_rms: st.result.residual,
            untuned_rms,
            kappa0: st.kappa0,
            epsilon: st.epsilon,
            fd_fallback: st.fd_fallback,
            solver_fallback: st.solver_fallback,
            solver_iterations: st.result.solver_iterations,
        });
        if st.pruned > 0 {
            layer
                .dense_mut(st.kind)
                .set_masks(st.mask.clone(), st.result.tuned.clone());
        }
    }
    Ok((
        LayerOutcome {
            index,
            budget: target,
            pruned_params,
            shortfall,
            rounds,
        },
        reports,
    ))
}

/// Prunes exactly `c` inputs of one dense by importance and tunes the rest.
fn prune_dense_fixed(
    layer: &mut TransformerLayer,
    kind: DenseKind,
    inputs: &LayerTrace,
    c: usize,
    cfg: &PruneConfig,
) -> Result<DenseReport> {
    let index = layer.index;
    let dense = layer.dense(kind).clone();
    let x = dense_inputs(inputs, kind)?;
    let x_mean = crate::model::column_mean(x);
    let scores = score_dense(&dense, &x_mean, cfg.epsilon).map_err(|e| with_dense_context(kind, index, e))?;
    let system = TuneSystem::new(&dense.weight, x, None, scores.epsilon)
        .map_err(|e| with_dense_context(kind, index, e))?;
    let q = dense.in_dim();
    let c = c.min(q - 1);
    let mut mask = vec![true; q];
    for &j in rank_neurons(&scores).iter().take(c) {
        mask[j] = false;
    }
    let result = system
        .solve(&mask, cfg.solver)
        .map_err(|e| with_dense_context(kind, index, e))?;
    let untuned: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let untuned_rms = system.rms(&untuned);
    let report = DenseReport {
        layer: index,
        kind,
        out_dim: dense.out_dim(),
        in_dim: q,
        pruned: c,
        pruned_fraction: c as f64 / q as f64,
        final_v_t: 0.0,
        variance: result.variance,
        reconstruction_rms: result.residual,
        untuned_rms,
        kappa0: scores.kappa0,
        epsilon: scores.epsilon,
        fd_fallback: scores.fallback,
        solver_fallback: result.fell_back,
        solver_iterations: result.solver_iterations,
    };
    if c > 0 {
        layer.dense_mut(kind).set_masks(mask, result.tuned);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    /// Target minus achieved; negative when the strategy overshoots.
    pub missing_params: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Captures {
    pub layer_scores: String,
    pub dense_inputs: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tokens: usize,
    pub perplexity_before: f64,
    pub perplexity_after: f64,
    pub kl: f64,
    pub logit_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub config: PruneConfig,
    pub exempt_layers: Vec<usize>,
    pub status: RunStatus,
    pub total_params: usize,
    pub target_params: f64,
    pub removed_layer_params: usize,
    pub neuron_pruned_params: usize,
    pub achieved_params: usize,
    pub achieved_ratio: f64,
    pub shortfall: Option<Shortfall>,
    pub no_op: bool,
    pub removed_layers: Vec<usize>,
    pub layer_history: Vec<Vec<LayerScore>>,
    pub final_layer_scores: Vec<LayerScore>,
    pub captures: Captures,
    pub plan: Vec<PlanEntry>,
    pub layers: Vec<LayerOutcome>,
    pub denses: Vec<DenseReport>,
    pub metrics: Option<EvalMetrics>,
    pub notes: Vec<String>,
}

impl PruneReport {
    fn new(strategy: Strategy, cfg: &PruneConfig, model: &Model) -> Self {
        let total = model.dense_param_count();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            strategy,
            config: cfg.clone(),
            exempt_layers: match strategy {
                Strategy::Neuron => Vec::new(),
                _ => cfg.exempt_layers(model),
            },
            status: RunStatus::Complete,
            total_params: total,
            target_params: cfg.ratio * total as f64,
            removed_layer_params: 0,
            neuron_pruned_params: 0,
            achieved_params: 0,
            achieved_ratio: 0.0,
            shortfall: None,
            no_op: false,
            removed_layers: Vec::new(),
            layer_history: Vec::new(),
            final_layer_scores: Vec::new(),
            captures: Captures {
                layer_scores: "none".into(),
                dense_inputs: "none".into(),
            },
            plan: Vec::new(),
            layers: Vec::new(),
            denses: Vec::new(),
            metrics: None,
            notes: Vec::new(),
        }
    }

    fn finish_accounting(&mut self) {
        self.achieved_params = self.removed_layer_params + self.neuron_pruned_params;
        self.achieved_ratio = self.achieved_params as f64 / self.total_params.max(1) as f64;
        self.no_op = self.achieved_params == 0;
    }
}

/// Successful run: the pruned (folded) model, its report and wall-clock
/// seconds per phase. Timings are kept out of the report so reruns produce
/// identical bytes.
#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: Model,
    pub report: PruneReport,
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct PruneFailure {
    pub error: Error,
    pub report: Box<PruneReport>,
}

impl std::fmt::Display for PruneFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for PruneFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

struct Timer {
    start: Instant,
    phases: Vec<(String, f64)>,
}

impl Timer {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            phases: Vec::new(),
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.phases.push((name.to_string(), (now - self.start).as_secs_f64()));
        self.start = now;
    }
}

/// Perplexity of both models and their fidelity, one forward each.
pub fn evaluate(original: &Model, pruned: &Model, batch: &[Vec<u32>]) -> Result<EvalMetrics> {
    let v = original.config.vocab;
    let (mut ce_a, mut ce_b, mut kl, mut mse) = (0.0, 0.0, 0.0, 0.0);
    let (mut next, mut positions) = (0usize, 0usize);
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        let la = original.forward(seq)?;
        let lb = pruned.forward(seq)?;
        for t in 0..seq.len() {
            let (ra, rb) = (la.row(t), lb.row(t));
            let (za, zb) = (log_sum_exp(ra), log_sum_exp(rb));
            if t + 1 < seq.len() {
                let y = seq[t + 1] as usize;
                ce_a += za - ra[y];
                ce_b += zb - rb[y];
                next += 1;
            }
            let mut k = 0.0;
            for j in 0..v {
                let (pa, pb) = (ra[j] - za, rb[j] - zb);
                k += pa.exp() * (pa - pb);
                mse += (ra[j] - rb[j]).powi(2);
            }
            kl += k.max(0.0);
            positions += 1;
        }
    }
    if next == 0 {
        return Err(crate::model::ModelError::TooFewTokens { need: 2, got: 0 }.into());
    }
    Ok(EvalMetrics {
        tokens: positions,
        perplexity_before: (ce_a / next as f64).exp(),
        perplexity_after: (ce_b / next as f64).exp(),
        kl: kl / positions as f64,
        logit_mse: mse / (positions * v) as f64,
    })
}

fn layer_capacity(layer: &TransformerLayer, cap: f64) -> usize {
    layer
        .denses
        .iter()
        .map(|d| {
            let q = d.in_dim();
            d.out_dim() * ((cap * q as f64).floor() as usize).min(q.saturating_sub(1))
        })
        .sum()
}

/// Runs one strategy end to end. On failure the partial report is returned
/// with the error.
pub fn prune(
    model: &Model,
    corpus: &[u8],
    strategy: Strategy,
    cfg: &PruneConfig,
) -> std::result::Result<PruneOutcome, PruneFailure> {
    let mut report = PruneReport::new(strategy, cfg, model);
    let mut timer = Timer::new();
    let result = (|| -> Result<Model> {
        cfg.validate(model)?;
        let calib = calibration_batch(corpus, cfg)?;
        let mut pruned = match strategy {
            Strategy::Comp => run_comp_phases(model, &calib.sequences, cfg, &mut report, &mut timer)?,
            Strategy::Layer => run_layer_only(model, &calib.sequences, cfg, &mut report, &mut timer)?,
            Strategy::Neuron => run_neuron_only(model, &calib.sequences, cfg, &mut report, &mut timer)?,
        };
        pruned.fold_masks();
        pruned.round_to_f32();
        report.finish_accounting();
        let eval = evaluation_batch(corpus, model, cfg.eval_tokens);
        report.metrics = Some(evaluate(model, &pruned, &eval.sequences)?);
        timer.lap("evaluate");
        Ok(pruned)
    })();
    match result {
        Ok(pruned) => Ok(PruneOutcome {
            model: pruned,
            report,
            timings: timer.phases,
        }),
        Err(error) => {
            report.finish_accounting();
            report.status = RunStatus::Partial {
                error: error.to_string(),
            };
            Err(PruneFailure {
                error,
                report: Box::new(report),
            })
        }
    }
}

pub fn run_comp(
    model: &Model,
    corpus: &[u8],
    cfg: &PruneConfig,
) -> std::result::Result<PruneOutcome, PruneFailure> {
    prune(model, corpus, Strategy::Comp, cfg)
}

fn run_comp_phases(
    original: &Model,
    calib: &[Vec<u32>],
    cfg: &PruneConfig,
    report: &mut PruneReport,
    timer: &mut Timer,
) -> Result<Model> {
    let exempt = cfg.exempt_layers(original);
    let n_total = original.dense_param_count() as f64;
    let mean_layer = n_total / original.n_layers() as f64;
    let target = report.target_params;
    if cfg.layers as f64 * mean_layer > target + 1e-9 * n_total {
        return Err(Error::Infeasible(format!(
            "removing {} layers ({:.0} parameters) overshoots the target {:.0}; lower the layer count or raise the ratio",
            cfg.layers,
            cfg.layers as f64 * mean_layer,
            target
        )));
    }
    let mut current = original.clone();
    let phase = iterative_layer_prune(&mut current, calib, cfg.layers, &exempt, cfg.layer_order)?;
    report.removed_layers = phase.removed.clone();
    report.layer_history = phase.history;
    report.removed_layer_params = original.dense_param_count() - current.dense_param_count();
    timer.lap("layer_phase");

    let (_, cur_trace) = current.forward_capture(calib, false)?;
    report.final_layer_scores = score_layers(&cur_trace)?;
    report.captures.layer_scores = "current model, re-scored after every removal".into();

    let entries: Vec<AllocationInput> = current
        .layers
        .iter()
        .zip(&report.final_layer_scores)
        .filter(|(l, _)| !exempt.contains(&l.index))
        .map(|(l, s)| AllocationInput {
            index: l.index,
            importance: s.importance,
            params: l.param_count(),
            capacity: layer_capacity(l, cfg.cap),
        })
        .collect();
    let remaining = target - report.removed_layer_params as f64;
    if entries.is_empty() {
        if remaining >= 0.5 {
            report.shortfall = Some(Shortfall {
                missing_params: remaining,
                reason: "every remaining layer is exempt from neuron pruning".into(),
            });
        }
        return Ok(current);
    }
    report.plan = allocate_ratios(&entries, remaining)?;
    timer.lap("allocate");

    let original_trace = if report.plan.iter().any(|p| p.budget > 0.0) {
        Some(original.forward_capture(calib, true)?.1)
    } else {
        None
    };
    report.captures.dense_inputs = match cfg.input_policy {
        InputPolicy::Identical => "original model, captured once".into(),
        InputPolicy::Propagated => {
            "current model, re-captured before each layer; targets from the original model".into()
        }
    };
    timer.lap("capture");

    let mut missing = 0.0;
    for entry in report.plan.clone() {
        let pos = current.position_of(entry.index).expect("planned layer exists");
        if entry.budget <= 0.0 {
            report.layers.push(LayerOutcome {
                index: entry.index,
                budget: 0.0,
                pruned_params: 0,
                shortfall: false,
                rounds: 0,
            });
            continue;
        }
        let orig = original_trace
            .as_ref()
            .and_then(|t| t.by_index(entry.index))
            .expect("original model holds every layer");
        let (outcome, denses) = match cfg.input_policy {
            InputPolicy::Identical => {
                prune_layer_neurons(&mut current.layers[pos], orig, None, entry.budget, cfg)?
            }
            InputPolicy::Propagated => {
                let (_, fresh) = current.forward_capture(calib, true)?;
                let inputs = fresh.by_index(entry.index).expect("current layer").clone();
                prune_layer_neurons(&mut current.layers[pos], &inputs, Some(orig), entry.budget, cfg)?
            }
        };
        if outcome.shortfall {
            missing += entry.budget - outcome.pruned_params as f64;
        }
        report.neuron_pruned_params += outcome.pruned_params;
        report.layers.push(outcome);
        report.denses.extend(denses);
    }
    if missing > 0.0 {
        report.shortfall = Some(Shortfall {
            missing_params: missing,
            reason: "per-dense caps reached before the layer budget".into(),
        });
    }
    timer.lap("neuron_phase");
    Ok(current)
}

fn run_layer_only(
    original: &Model,
    calib: &[Vec<u32>],
    cfg: &PruneConfig,
    report: &mut PruneReport,
    timer: &mut Timer,
) -> Result<Model> {
    let exempt = cfg.exempt_layers(original);
    let n_total = original.dense_param_count() as f64;
    let mean_layer = n_total / original.n_layers() as f64;
    let wanted = ((report.target_params / mean_layer) + 1e-9).floor() as usize;
    let removable = original.layers.iter().filter(|l| !exempt.contains(&l.index)).count();
    let n = wanted.min(removable);
    if n < wanted {
        report.notes.push(format!(
            "{wanted} layers requested by the ratio, only {removable} removable"
        ));
    }
    let mut current = original.clone();
    let phase = iterative_layer_prune(&mut current, calib, n, &exempt, cfg.layer_order)?;
    report.removed_layers = phase.removed;
    report.layer_history = phase.history;
    report.removed_layer_params = original.dense_param_count() - current.dense_param_count();
    report.captures.layer_scores = "current model, re-scored after every removal".into();
    let missing = report.target_params - report.removed_layer_params as f64;
    if missing > 0.01 * n_total {
        report.shortfall = Some(Shortfall {
            missing_params: missing,
            reason: if n < wanted {
                "not enough removable layers".into()
            } else {
                "layer granularity: the ratio is not a whole number of layers".into()
            },
        });
    }
    if n == 0 {
        report.notes.push("ratio below one layer's parameters: no layer removed".into());
    }
    timer.lap("layer_phase");
    Ok(current)
}

fn run_neuron_only(
    original: &Model,
    calib: &[Vec<u32>],
    cfg: &PruneConfig,
    report: &mut PruneReport,
    timer: &mut Timer,
) -> Result<Model> {
    let mut current = original.clone();
    if cfg.ratio == 0.0 {
        return Ok(current);
    }
    let (_, trace) = original.forward_capture(calib, true)?;
    report.captures.dense_inputs = "original model, captured once".into();
    timer.lap("capture");
    for pos in 0..current.layers.len() {
        let index = current.layers[pos].index;
        let layer_trace = trace.by_index(index).expect("original layer");
        let kinds: Vec<DenseKind> = current.layers[pos].denses.iter().map(|d| d.kind).collect();
        let mut layer_params = 0;
        for kind in kinds {
            let q = current.layers[pos].dense(kind).in_dim();
            let c = (cfg.ratio * q as f64).round() as usize;
            let d = prune_dense_fixed(&mut current.layers[pos], kind, layer_trace, c, cfg)?;
            layer_params += d.pruned * d.out_dim;
            report.denses.push(d);
        }
        report.neuron_pruned_params += layer_params;
        report.layers.push(LayerOutcome {
            index,
            budget: cfg.ratio * current.layers[pos].param_count() as f64,
            pruned_params: layer_params,
            shortfall: false,
            rounds: 0,
        });
    }
    let n_total = original.dense_param_count() as f64;
    let missing = report.target_params - report.neuron_pruned_params as f64;
    if missing.abs() > 0.01 * n_total {
        report.shortfall = Some(Shortfall {
            missing_params: missing,
            reason: "uniform per-dense rounding; biases are never pruned".into(),
        });
    }
    timer.lap("neuron_phase");
    Ok(current)
}

/// Paired identical-input / propagated-input COMP runs.
pub fn ablation_identical_input(
    model: &Model,
    corpus: &[u8],
    cfg: &PruneConfig,
) -> std::result::Result<(PruneOutcome, PruneOutcome), PruneFailure> {
    let mut a = cfg.clone();
    a.input_policy = InputPolicy::Identical;
    let mut b = cfg.clone();
    b.input_policy = InputPolicy::Propagated;
    Ok((run_comp(model, corpus, &a)?, run_comp(model, corpus, &b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderAblation {
    pub layers: usize,
    pub iterative_order: Vec<usize>,
    pub one_shot_order: Vec<usize>,
    /// Both orders removed the same layers in the same sequence.
    pub identical_orders: bool,
    pub iterative: EvalMetrics,
    pub one_shot: EvalMetrics,
}

/// Removes `cfg.layers` layers with both orderings (no neuron phase) and
/// evaluates each result.
pub fn ablation_iterative_order(model: &Model, corpus: &[u8], cfg: &PruneConfig) -> Result<OrderAblation> {
    cfg.validate(model)?;
    let calib = calibration_batch(corpus, cfg)?;
    let exempt = cfg.exempt_layers(model);
    let eval = evaluation_batch(corpus, model, cfg.eval_tokens);
    let run = |order| -> Result<(Vec<usize>, EvalMetrics)> {
        let mut m = model.clone();
        let phase = iterative_layer_prune(&mut m, &calib.sequences, cfg.layers, &exempt, order)?;
        Ok((phase.removed, evaluate(model, &m, &eval.sequences)?))
    };
    let (iterative_order, iterative) = run(LayerOrder::Iterative)?;
    let (one_shot_order, one_shot) = run(LayerOrder::OneShot)?;
    Ok(OrderAblation {
        layers: cfg.layers,
        identical_orders: iterative_order == one_shot_order,
        iterative_order,
        one_shot_order,
        iterative,
        one_shot,
    })
}

/// Layer scores of the model, or of every step of `iterations` removals.
pub fn score_layer_blocks(
    model: &Model,
    calib: &[Vec<u32>],
    iterations: usize,
    exempt: &[usize],
) -> Result<LayerPhase> {
    if iterations == 0 {
        let (_, trace): (_, ActivationTrace) = model.forward_capture(calib, false)?;
        return Ok(LayerPhase {
            removed: Vec::new(),
            history: vec![score_layers(&trace)?],
        });
    }
    let mut m = model.clone();
    iterative_layer_prune(&mut m, calib, iterations, exempt, LayerOrder::Iterative)
}
