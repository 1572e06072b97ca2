//! End-to-end training driver over a simulated DP × PP cluster, with the
//! gradient-error probe, metrics and run artifacts.

pub mod data;
pub mod gradcheck;
mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use data::{Batch, DatasetConfig, ShardedDataset};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, GroupError};
pub use metrics::{MetricsRecord, MetricsWriter, METRICS_HEADER};

use crate::approx::{backward_block_mecefo, ProjectionCache, Rank};
use crate::cluster::{
    aggregate_gradients, write_events_jsonl, ActiveSets, ClusterConfig, ClusterState, Event, EventKind,
    FailureInjector, FailureScenario,
};
use crate::costmodel::{CostInputs, CostTable, FailurePolicy};
use crate::error::{Error, Result};
use crate::linalg::SvdConfig;
use crate::model::{
    backward_block_exact, backward_model, cross_entropy, forward_model, CacheMode, GradientSet, ModelConfig,
    ModelWeights, ParamId,
};
use crate::optim::{lr_at, OptimState, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterShape {
    pub dp: usize,
    pub pp: usize,
}

impl Default for ClusterShape {
    fn default() -> Self {
        ClusterShape { dp: 4, pp: 4 }
    }
}

/// When the gradient-error probe runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Single-batch error every this many iterations; 0 disables it.
    #[serde(default)]
    pub rho1_every: u64,
    /// Evaluation-set error every this many iterations; 0 disables it.
    #[serde(default)]
    pub rho2_every: u64,
    /// Sequences per rank in the evaluation set.
    #[serde(default = "default_rho2_sequences")]
    pub rho2_sequences: usize,
    /// Leave the errors absent while no rank is affected.
    #[serde(default = "default_true")]
    pub only_under_faults: bool,
}

fn default_rho2_sequences() -> usize {
    16
}

fn default_true() -> bool {
    true
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            rho1_every: 0,
            rho2_every: 0,
            rho2_sequences: default_rho2_sequences(),
            only_under_faults: true,
        }
    }
}

/// Simulated clock used for `sim_time_s` and scheduled failures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimClock {
    pub node_flops_per_s: f64,
    pub fetch_cost_s: f64,
    pub microbatches: u64,
}

impl Default for SimClock {
    fn default() -> Self {
        SimClock {
            node_flops_per_s: 1e9,
            fetch_cost_s: 0.01,
            microbatches: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub cluster: ClusterShape,
    pub scenario: FailureScenario,
    pub optimizer: OptimizerConfig,
    pub lr: f64,
    pub rank: Rank,
    pub tau: u64,
    pub iterations: u64,
    /// Sequences per iteration across all DP ranks.
    pub global_batch: usize,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub probe: ProbeConfig,
    pub clock: SimClock,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            cluster: ClusterShape::default(),
            scenario: FailureScenario::none(),
            optimizer: OptimizerConfig::adamw(),
            lr: 3e-3,
            rank: Rank::default(),
            tau: 100,
            iterations: 2000,
            global_batch: 4,
            seed: 0,
            dataset: DatasetConfig::default(),
            probe: ProbeConfig::default(),
            clock: SimClock::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.scenario.validate()?;
        self.cluster_config()?.validate()?;
        if self.global_batch == 0 || self.global_batch % self.cluster.dp != 0 {
            return Err(Error::Config(format!(
                "global_batch {} is not a positive multiple of dp {}",
                self.global_batch, self.cluster.dp
            )));
        }
        if self.tau == 0 || self.iterations == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config("tau and iterations must be at least 1 and lr non-negative".into()));
        }
        if let Rank::Fixed(0) = self.rank {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if let DatasetConfig::Corpus { path: Some(p), .. } = &self.dataset {
            if !Path::new(p).exists() {
                return Err(Error::Config(format!("corpus path {p} does not exist")));
            }
        }
        Ok(())
    }

    pub fn cluster_config(&self) -> Result<ClusterConfig> {
        ClusterConfig::contiguous(self.cluster.dp, self.cluster.pp, self.model.layers)
    }

    pub fn sequences_per_rank(&self) -> usize {
        self.global_batch / self.cluster.dp
    }

    fn cost_inputs(&self) -> CostInputs {
        let rank = match self.rank {
            Rank::Fixed(r) => r,
            Rank::Full => self.model.ffn_intermediate.max(self.model.hidden),
        };
        CostInputs {
            model: self.model.clone(),
            tokens_per_rank: (self.sequences_per_rank() * self.model.seq_len) as u64,
            rank,
            tau: self.tau,
            node_flops_per_s: self.clock.node_flops_per_s,
            fetch_cost_s: self.clock.fetch_cost_s,
            microbatches: self.clock.microbatches,
            checkpoint_interval_s: 1.0,
            restart_s: 0.0,
        }
    }
}

/// Loss and local gradients of one rank. With projection caches the rank
/// runs neighbor-mode layers through the approximate backward; without,
/// every layer is exact.
pub fn rank_gradients(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    state: &ClusterState,
    rank: usize,
    batch: &Batch,
    proj: Option<&mut ProjectionCache>,
) -> Result<(f64, GradientSet)> {
    let layers = weights.num_layers();
    let modes: Vec<CacheMode> = match proj {
        Some(_) => (0..layers)
            .map(|l| {
                if state.layer_in_neighbor_mode(rank, l) {
                    CacheMode::FfnInputOnly
                } else {
                    CacheMode::Full
                }
            })
            .collect(),
        None => vec![CacheMode::Full; layers],
    };
    let (logits, cache) = forward_model(weights, cfg, &batch.inputs, &modes)?;
    let (loss, dlogits) = cross_entropy(&logits, &batch.targets)?;
    let grads = match proj {
        Some(p) => backward_model(weights, &cache, &dlogits, |layer, c, dy| match c.mode() {
            CacheMode::Full => backward_block_exact(&weights.layers[layer], cfg, c, dy),
            CacheMode::FfnInputOnly => backward_block_mecefo(&weights.layers[layer], cfg, layer, c, dy, p),
        })?,
        None => backward_model(weights, &cache, &dlogits, |layer, c, dy| {
            backward_block_exact(&weights.layers[layer], cfg, c, dy)
        })?,
    };
    Ok((loss, grads))
}

/// `‖ḡ − ḡ⋆‖² / ‖ḡ⋆‖²` over all parameters as one flat vector; parameters
/// missing from `g` count as zero.
pub fn relative_error(g: &GradientSet, g_star: &GradientSet) -> f64 {
    let denom = g_star.norm_sq();
    if denom == 0.0 {
        return 0.0;
    }
    g.distance_sq(g_star) / denom
}

fn all_ranks(ids: &[ParamId], n: usize) -> ActiveSets {
    ids.iter().map(|&id| (id, (0..n).collect())).collect()
}

fn mean_ascending(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Stepwise driver; `run_training` loops it and writes the artifacts.
pub struct Trainer {
    cfg: RunConfig,
    weights: ModelWeights,
    optim: OptimState,
    state: ClusterState,
    injector: FailureInjector,
    projections: Vec<ProjectionCache>,
    data: ShardedDataset,
    costs: CostTable,
    param_ids: Vec<ParamId>,
    iteration: u64,
    sim_time: f64,
    events: Vec<Event>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let cluster = cfg.cluster_config()?;
        let weights = ModelWeights::init(&cfg.model, cfg.seed)?;
        let optim = OptimState::new(cfg.optimizer, &weights)?;
        let mut scenario = cfg.scenario.clone();
        scenario.seed ^= cfg.seed;
        let injector = FailureInjector::new(scenario, &cluster)?;
        let projections = (0..cluster.dp)
            .map(|_| ProjectionCache::new(cfg.rank, cfg.tau, SvdConfig::default()))
            .collect::<Result<_>>()?;
        let data = ShardedDataset::load(&cfg.dataset, &cfg.model, cluster.dp, cfg.seed)?;
        let costs = CostTable::new(&cfg.cost_inputs())?;
        Ok(Trainer {
            param_ids: weights.param_ids(),
            state: ClusterState::new(cluster)?,
            weights,
            optim,
            injector,
            projections,
            data,
            costs,
            iteration: 0,
            sim_time: 0.0,
            events: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn cluster(&self) -> &ClusterState {
        &self.state
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn projections(&self) -> &[ProjectionCache] {
        &self.projections
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    fn due(every: u64, t: u64) -> bool {
        every > 0 && t % every == 0
    }

    /// One global step: availability check and reassignment, per-rank
    /// forward and backward, active-set averaging, optimizer update.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let t = self.iteration;
        let n = self.state.config().dp;
        let events = self.injector.step(&mut self.state, self.sim_time, t)?;
        let mut fetches = 0;
        for e in &events {
            if e.kind == EventKind::FailoverFetch {
                // A fresh neighbor episode: both the adopted layers and the
                // adopter's own layers start from new projections.
                let adopted = e.details["adopted_stage"].as_u64().unwrap_or(0) as usize;
                let proj = &mut self.projections[e.node.rank];
                for stage in [adopted, e.node.stage] {
                    for layer in self.state.config().layers_of(stage) {
                        proj.reset(layer);
                    }
                }
            }
            fetches += usize::from(e.is_fetch());
        }
        self.events.extend(events);

        let lr = lr_at(t, self.cfg.iterations, self.cfg.lr);
        let seqs = self.cfg.sequences_per_rank();
        let mut losses = Vec::with_capacity(n);
        let mut per_rank = Vec::with_capacity(n);
        let mut batches = Vec::with_capacity(n);
        for rank in 0..n {
            let batch = self.data.batch(rank, t, seqs);
            let (loss, g) = rank_gradients(
                &self.weights,
                &self.cfg.model,
                &self.state,
                rank,
                &batch,
                Some(&mut self.projections[rank]),
            )?;
            losses.push(loss);
            per_rank.push(g);
            batches.push(batch);
        }
        let loss = mean_ascending(&losses);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: format!("training loss at iteration {t}"),
            });
        }
        let sets = self.state.active_sets(&self.param_ids);
        let g_bar = aggregate_gradients(&per_rank, &sets)?;

        let affected = self.state.affected_ranks();
        let probe_allowed = !(self.cfg.probe.only_under_faults && affected.is_empty());
        let rho1 = if probe_allowed && Self::due(self.cfg.probe.rho1_every, t) {
            let mut star = Vec::with_capacity(n);
            for rank in 0..n {
                if affected.contains(&rank) {
                    let (_, g) = rank_gradients(&self.weights, &self.cfg.model, &self.state, rank, &batches[rank], None)?;
                    star.push(g);
                } else {
                    star.push(per_rank[rank].clone());
                }
            }
            let g_star = aggregate_gradients(&star, &all_ranks(&self.param_ids, n))?;
            Some(relative_error(&g_bar, &g_star))
        } else {
            None
        };
        let rho2 = if probe_allowed && Self::due(self.cfg.probe.rho2_every, t) {
            Some(self.eval_set_error()?)
        } else {
            None
        };

        self.optim.step(&mut self.weights, &g_bar, lr)?;

        let (compute_s, _) = self.costs.iteration_seconds(&self.state, FailurePolicy::Mecefo);
        self.sim_time += compute_s + fetches as f64 * self.cfg.clock.fetch_cost_s;
        self.iteration += 1;
        let active_mha = self
            .state
            .config()
            .layer_stage
            .iter()
            .enumerate()
            .map(|(l, _)| self.state.active_set(ParamId::Layer(l, crate::model::WeightKind::Q)).len())
            .collect();
        Ok(MetricsRecord {
            iteration: t,
            loss,
            perplexity: loss.exp(),
            rho1,
            rho2,
            lr,
            sim_time_s: self.sim_time,
            affected_ranks: affected.len(),
            active_mha_ranks: active_mha,
        })
    }

    /// Mean loss over every rank's evaluation batch.
    pub fn eval_loss(&self) -> Result<f64> {
        let n = self.state.config().dp;
        let mut losses = Vec::with_capacity(n);
        for rank in 0..n {
            let batch = self.data.eval_batch(rank, self.cfg.probe.rho2_sequences);
            let modes = vec![CacheMode::FfnInputOnly; self.weights.num_layers()];
            let (logits, _) = forward_model(&self.weights, &self.cfg.model, &batch.inputs, &modes)?;
            losses.push(cross_entropy(&logits, &batch.targets)?.0);
        }
        Ok(mean_ascending(&losses))
    }

    /// Relative error on the fixed evaluation set, using throwaway copies of
    /// the projection caches.
    fn eval_set_error(&self) -> Result<f64> {
        let n = self.state.config().dp;
        let mut approx = Vec::with_capacity(n);
        let mut exact = Vec::with_capacity(n);
        for rank in 0..n {
            let batch = self.data.eval_batch(rank, self.cfg.probe.rho2_sequences);
            let mut proj = self.projections[rank].clone();
            let (_, g) = rank_gradients(&self.weights, &self.cfg.model, &self.state, rank, &batch, Some(&mut proj))?;
            approx.push(g);
            let (_, g) = rank_gradients(&self.weights, &self.cfg.model, &self.state, rank, &batch, None)?;
            exact.push(g);
        }
        let g = aggregate_gradients(&approx, &self.state.active_sets(&self.param_ids))?;
        let g_star = aggregate_gradients(&exact, &all_ranks(&self.param_ids, n))?;
        Ok(relative_error(&g, &g_star))
    }
}

/// Result of a completed run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    /// Loss of the final weights on the fixed evaluation set.
    pub eval_loss: f64,
    pub events: Vec<Event>,
    pub weights: ModelWeights,
    pub svd_calls: u64,
}

impl RunOutput {
    pub fn final_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.loss)
    }

    /// Mean loss over the last `k` iterations.
    pub fn tail_loss(&self, k: usize) -> f64 {
        let tail = &self.metrics[self.metrics.len().saturating_sub(k)..];
        tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64
    }
}

/// Runs the configured number of iterations. With an output directory,
/// `metrics.csv`, `events.jsonl` and the final weights are written there;
/// an aborted run still leaves every completed row and event on disk.
pub fn run_training(cfg: RunConfig) -> Result<RunOutput> {
    run_training_with(cfg, |_| {})
}

/// As `run_training`, calling `on_record` after each iteration.
pub fn run_training_with(cfg: RunConfig, mut on_record: impl FnMut(&MetricsRecord)) -> Result<RunOutput> {
    let out_dir = cfg.output_dir.clone();
    let mut trainer = Trainer::new(cfg)?;
    let mut writer = match &out_dir {
        Some(dir) => Some(MetricsWriter::create(dir)?),
        None => None,
    };
    let mut metrics = Vec::with_capacity(trainer.cfg.iterations as usize);
    let mut failure = None;
    while !trainer.is_done() {
        match trainer.step() {
            Ok(rec) => {
                if let Some(w) = writer.as_mut() {
                    w.write(&rec)?;
                }
                on_record(&rec);
                metrics.push(rec);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if let Some(dir) = &out_dir {
        if let Some(w) = writer {
            w.finish()?;
        }
        let file = fs::File::create(dir.join("events.jsonl"))?;
        write_events_jsonl(std::io::BufWriter::new(file), &trainer.events)?;
        if failure.is_none() {
            write_weights(dir, &trainer.weights)?;
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let eval_loss = trainer.eval_loss()?;
    Ok(RunOutput {
        metrics,
        eval_loss,
        svd_calls: trainer.projections.iter().map(ProjectionCache::svd_calls).sum(),
        events: trainer.events,
        weights: trainer.weights,
    })
}

/// Writes `final_weights.bin` (little-endian f64, tensors back to back) and
/// `final_weights.json` listing each tensor's name, shape and value offset.
pub fn write_weights(dir: &Path, weights: &ModelWeights) -> Result<()> {
    let (bytes, entries) = weights.to_flat_bytes();
    fs::write(dir.join("final_weights.bin"), bytes)?;
    let manifest = serde_json::json!({
        "dtype": "f64",
        "byte_order": "little",
        "tensors": entries,
    });
    fs::write(dir.join("final_weights.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Summary of a probe run.
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub probed_iterations: usize,
    pub max_rho1: Option<f64>,
    pub mean_rho1: Option<f64>,
    pub max_rho2: Option<f64>,
    pub records: Vec<MetricsRecord>,
}

/// Trains with the probe enabled (every iteration unless configured
/// otherwise) and summarizes the single-batch and evaluation-set errors.
pub fn check_assumption(mut cfg: RunConfig) -> Result<AssumptionReport> {
    if cfg.probe.rho1_every == 0 {
        cfg.probe.rho1_every = 1;
    }
    if cfg.probe.rho2_every == 0 {
        cfg.probe.rho2_every = 50;
    }
    let out = run_training(cfg)?;
    let rho1: Vec<f64> = out.metrics.iter().filter_map(|m| m.rho1).collect();
    let rho2 = out.metrics.iter().filter_map(|m| m.rho2);
    Ok(AssumptionReport {
        probed_iterations: rho1.len(),
        max_rho1: rho1.iter().copied().reduce(f64::max),
        mean_rho1: (!rho1.is_empty()).then(|| rho1.iter().sum::<f64>() / rho1.len() as f64),
        max_rho2: rho2.reduce(f64::max),
        records: out.metrics,
    })
}
