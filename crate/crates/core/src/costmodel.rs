//! Analytic FLOP and activation-memory accounting, and a bottleneck-stage
//! throughput simulation that replays failure scenarios.
//!
//! Only transformer blocks are charged; embedding and output head costs are
//! left out so that stages with equal layer counts cost the same.

use std::io::Write;
use std::ops::{Add, AddAssign, Mul};

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterConfig, ClusterState, FailureInjector, FailureScenario, NodeId, NodeStatus};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearOp {
    Fprop,
    Wgrad,
    Dgrad,
    Rcomp,
    ApproxWgrad(usize),
}

/// FLOPs of one op on a linear map with `m` outputs and `n` inputs over `b`
/// tokens.
pub fn linear_flops(b: u64, m: u64, n: u64, op: LinearOp) -> u64 {
    match op {
        LinearOp::Fprop | LinearOp::Wgrad | LinearOp::Dgrad | LinearOp::Rcomp => 2 * b * m * n,
        LinearOp::ApproxWgrad(r) => {
            let r = r as u64;
            2 * b * r * n + 2 * b * r * m + 2 * r * m * n
        }
    }
}

/// Nominal cost of one truncated SVD of an `m × n` matrix: the Gram product
/// plus a fixed number of block power steps on an `n × 2r` block.
pub fn svd_flops(m: u64, n: u64, r: u64) -> u64 {
    const POWER_STEPS: u64 = 20;
    let q = (2 * r).min(n);
    2 * m * n * n + POWER_STEPS * (2 * n * n * q + 4 * n * q * q)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub fprop: f64,
    pub wgrad: f64,
    pub dgrad: f64,
    pub rcomp: f64,
    pub approx_wgrad: f64,
    pub svd_amortized: f64,
}

impl FlopBreakdown {
    pub fn total(&self) -> f64 {
        self.fprop + self.wgrad + self.dgrad + self.rcomp + self.approx_wgrad + self.svd_amortized
    }

    pub fn backward(&self) -> f64 {
        self.wgrad + self.dgrad + self.approx_wgrad
    }

    fn charge(&mut self, op: LinearOp, flops: u64) {
        let f = flops as f64;
        match op {
            LinearOp::Fprop => self.fprop += f,
            LinearOp::Wgrad => self.wgrad += f,
            LinearOp::Dgrad => self.dgrad += f,
            LinearOp::Rcomp => self.rcomp += f,
            LinearOp::ApproxWgrad(_) => self.approx_wgrad += f,
        }
    }
}

impl Add for FlopBreakdown {
    type Output = FlopBreakdown;
    fn add(mut self, o: FlopBreakdown) -> FlopBreakdown {
        self += o;
        self
    }
}

impl AddAssign for FlopBreakdown {
    fn add_assign(&mut self, o: FlopBreakdown) {
        self.fprop += o.fprop;
        self.wgrad += o.wgrad;
        self.dgrad += o.dgrad;
        self.rcomp += o.rcomp;
        self.approx_wgrad += o.approx_wgrad;
        self.svd_amortized += o.svd_amortized;
    }
}

impl Mul<f64> for FlopBreakdown {
    type Output = FlopBreakdown;
    fn mul(self, k: f64) -> FlopBreakdown {
        FlopBreakdown {
            fprop: self.fprop * k,
            wgrad: self.wgrad * k,
            dgrad: self.dgrad * k,
            rcomp: self.rcomp * k,
            approx_wgrad: self.approx_wgrad * k,
            svd_amortized: self.svd_amortized * k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    Standard,
    NeighborMecefo,
    NeighborNaive,
}

/// Cost of one transformer block for one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockCost {
    pub mha: FlopBreakdown,
    pub ffn: FlopBreakdown,
    pub activation_bytes: f64,
}

impl BlockCost {
    pub fn flops(&self) -> FlopBreakdown {
        self.mha + self.ffn
    }
}

const BYTES_PER_VALUE: f64 = 8.0;

/// Per-block FLOPs and activation bytes over `b` tokens. `r` is the low-rank
/// Wgrad rank and `tau` the projection refresh period. NeighborNaive is the
/// Standard cost; doubling happens per adopted stage in the node cost.
pub fn block_cost(cfg: &ModelConfig, mode: BlockMode, r: usize, tau: u64, b: u64) -> Result<BlockCost> {
    cfg.validate()?;
    if b == 0 || tau == 0 || r == 0 {
        return Err(Error::Config("block cost needs b, r and tau of at least 1".into()));
    }
    let m = cfg.hidden as u64;
    let f = cfg.ffn_intermediate as u64;
    let s = cfg.seq_len as u64;
    let h = cfg.heads as u64;
    // (outputs, inputs) of each linear map.
    let mha_linear = [(m, m); 4];
    let ffn_linear = [(f, m), (f, m), (m, f)];
    // Score and context products over all heads of each sequence.
    let core_fprop = (4 * b * s * m) as f64;

    let mut cost = BlockCost::default();
    let exact = [LinearOp::Fprop, LinearOp::Wgrad, LinearOp::Dgrad];
    match mode {
        BlockMode::Standard | BlockMode::NeighborNaive => {
            for (out, inp) in mha_linear {
                for op in exact {
                    cost.mha.charge(op, linear_flops(b, out, inp, op));
                }
            }
            cost.mha.fprop += core_fprop;
            cost.mha.dgrad += 2.0 * core_fprop;
            for (out, inp) in ffn_linear {
                for op in exact {
                    cost.ffn.charge(op, linear_flops(b, out, inp, op));
                }
            }
            let values = 10 * b * m + 2 * b + b * s * h + 3 * b * f;
            cost.activation_bytes = values as f64 * BYTES_PER_VALUE;
        }
        BlockMode::NeighborMecefo => {
            for (out, inp) in mha_linear {
                cost.mha.charge(LinearOp::Fprop, linear_flops(b, out, inp, LinearOp::Fprop));
            }
            cost.mha.fprop += core_fprop;
            for (out, inp) in ffn_linear {
                let rank = r.min(inp as usize);
                for op in [LinearOp::Fprop, LinearOp::Dgrad, LinearOp::Rcomp, LinearOp::ApproxWgrad(rank)] {
                    cost.ffn.charge(op, linear_flops(b, out, inp, op));
                }
                cost.ffn.svd_amortized += svd_flops(out, inp, rank as u64) as f64 / tau as f64;
            }
            cost.activation_bytes = (2 * b * m) as f64 * BYTES_PER_VALUE;
        }
    }
    Ok(cost)
}

/// How a run reacts to node failures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Neighbor-do-both with the cheap neighbor-mode backward.
    Mecefo,
    /// Neighbor-do-both running both stages at full cost.
    NeighborNaive,
    /// Roll back to the last checkpoint and restart on spare nodes.
    CheckpointRestart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostInputs {
    pub model: ModelConfig,
    /// Tokens processed by each DP rank per iteration.
    pub tokens_per_rank: u64,
    pub rank: usize,
    pub tau: u64,
    pub node_flops_per_s: f64,
    /// Seconds charged per weight/optimizer fetch event.
    pub fetch_cost_s: f64,
    pub microbatches: u64,
    pub checkpoint_interval_s: f64,
    pub restart_s: f64,
}

impl CostInputs {
    /// A 1B-class decoder on accelerator-scale throughput.
    pub fn reference() -> Self {
        CostInputs {
            model: ModelConfig {
                vocab: 32000,
                hidden: 2048,
                heads: 16,
                ffn_intermediate: 5504,
                layers: 24,
                seq_len: 1024,
                rope: true,
            },
            tokens_per_rank: 256 * 1024,
            rank: 128,
            tau: 200,
            node_flops_per_s: 1.5e14,
            fetch_cost_s: 2.0,
            microbatches: 16,
            checkpoint_interval_s: 600.0,
            restart_s: 900.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = self.tokens_per_rank > 0
            && self.rank > 0
            && self.tau > 0
            && self.node_flops_per_s > 0.0
            && self.fetch_cost_s >= 0.0
            && self.microbatches > 0
            && self.checkpoint_interval_s > 0.0
            && self.restart_s >= 0.0;
        if positive {
            Ok(())
        } else {
            Err(Error::Config("cost inputs must be positive".into()))
        }
    }

    fn bubble_factor(&self, pp: usize) -> f64 {
        (self.microbatches + pp as u64 - 1) as f64 / self.microbatches as f64
    }
}

impl Default for CostInputs {
    fn default() -> Self {
        Self::reference()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: NodeId,
    pub status: NodeStatus,
    pub flops: FlopBreakdown,
    pub activation_bytes: f64,
}

/// Precomputed block costs for the three modes.
#[derive(Clone, Debug)]
pub struct CostTable {
    standard: BlockCost,
    mecefo: BlockCost,
    inputs: CostInputs,
}

impl CostTable {
    pub fn new(inputs: &CostInputs) -> Result<Self> {
        inputs.validate()?;
        let b = inputs.tokens_per_rank;
        Ok(CostTable {
            standard: block_cost(&inputs.model, BlockMode::Standard, inputs.rank, inputs.tau, b)?,
            mecefo: block_cost(&inputs.model, BlockMode::NeighborMecefo, inputs.rank, inputs.tau, b)?,
            inputs: inputs.clone(),
        })
    }

    /// Compute time of one iteration and the stage of its slowest node,
    /// before fetch and restart costs.
    pub fn iteration_seconds(&self, state: &ClusterState, policy: FailurePolicy) -> (f64, usize) {
        let (flops, stage) = bottleneck(&self.node_costs(state, policy));
        (
            flops / self.inputs.node_flops_per_s * self.inputs.bubble_factor(state.config().pp),
            stage,
        )
    }

    /// Cost of every live node. A doubled node runs all of its layers in
    /// neighbor mode under MeCeFO and at full cost under the naive policy.
    pub fn node_costs(&self, state: &ClusterState, policy: FailurePolicy) -> Vec<NodeCost> {
        let cfg = state.config();
        state
            .node_ids()
            .map(|node| {
                let status = state.status(node);
                let block = match (status, policy) {
                    (NodeStatus::NeighborDoubled, FailurePolicy::Mecefo) => self.mecefo,
                    _ => self.standard,
                };
                let layers: usize = state.workloads(node).iter().map(|&s| cfg.layers_of(s).len()).sum();
                NodeCost {
                    node,
                    status,
                    flops: block.flops() * layers as f64,
                    activation_bytes: block.activation_bytes * layers as f64,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub iteration: u64,
    pub sim_time_s: f64,
    pub bottleneck_stage: usize,
    pub flops_total: f64,
    pub activation_bytes_max: f64,
    pub tokens_per_s: f64,
    pub degradation_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub policy: FailurePolicy,
    pub fault_free_iteration_s: f64,
    pub fault_free_tokens_per_s: f64,
    pub tokens_per_s: f64,
    pub degradation_pct: f64,
    pub fetch_events: u64,
    pub failures: u64,
    /// Node costs at the slowest iteration.
    pub peak_nodes: Vec<NodeCost>,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

fn bottleneck(costs: &[NodeCost]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for c in costs {
        let f = c.flops.total();
        if f > best.0 {
            best = (f, c.node.stage);
        }
    }
    best
}

/// Replays `scenario` for `iterations` steps. Each iteration lasts as long as
/// the slowest node, scaled by the pipeline fill factor, plus fetch costs.
pub fn simulate_throughput(
    cluster: &ClusterConfig,
    scenario: &FailureScenario,
    inputs: &CostInputs,
    iterations: u64,
    policy: FailurePolicy,
) -> Result<CostReport> {
    let table = CostTable::new(inputs)?;
    let mut state = ClusterState::new(cluster.clone())?;
    let mut injector = FailureInjector::new(scenario.clone(), cluster)?;
    let bubble = inputs.bubble_factor(cluster.pp);
    let tokens_per_iter = inputs.tokens_per_rank as f64 * cluster.dp as f64;

    let healthy = table.node_costs(&state, policy);
    let fault_free_iteration_s = bottleneck(&healthy).0 / inputs.node_flops_per_s * bubble;
    let fault_free_tokens_per_s = tokens_per_iter / fault_free_iteration_s;

    let mut time = 0.0;
    let mut useful_tokens = 0.0;
    let mut checkpointed_tokens = 0.0;
    let mut last_checkpoint = 0.0;
    let mut fetch_events = 0;
    let mut failures = 0;
    let mut peak = (0.0, healthy);
    let mut rows = Vec::with_capacity(iterations as usize);

    for it in 0..iterations {
        let mut stall = 0.0;
        match policy {
            FailurePolicy::Mecefo | FailurePolicy::NeighborNaive => {
                let events = injector.step(&mut state, time, it)?;
                let fetches = events.iter().filter(|e| e.is_fetch()).count() as u64;
                failures += events.iter().filter(|e| e.kind == crate::cluster::EventKind::Failure).count() as u64;
                fetch_events += fetches;
                stall += fetches as f64 * inputs.fetch_cost_s;
            }
            FailurePolicy::CheckpointRestart => {
                let events = injector.inject(&mut state, time, it);
                if !events.is_empty() {
                    failures += events.len() as u64;
                    // Spares replace the failed nodes; progress since the
                    // last checkpoint is lost.
                    for e in &events {
                        state.recover_node(e.node, time, it);
                    }
                    useful_tokens = checkpointed_tokens;
                    stall += inputs.restart_s;
                    last_checkpoint = time + stall;
                }
            }
        }

        let costs = table.node_costs(&state, policy);
        let (max_flops, stage) = bottleneck(&costs);
        let duration = max_flops / inputs.node_flops_per_s * bubble + stall;
        let flops_total: f64 = costs.iter().map(|c| c.flops.total()).sum();
        let act_max = costs.iter().map(|c| c.activation_bytes).fold(0.0, f64::max);
        if duration > peak.0 {
            peak = (duration, costs);
        }

        time += duration;
        useful_tokens += tokens_per_iter;
        if policy == FailurePolicy::CheckpointRestart && time - last_checkpoint >= inputs.checkpoint_interval_s {
            checkpointed_tokens = useful_tokens;
            last_checkpoint = time;
        }
        let tokens_per_s = useful_tokens / time;
        rows.push(CostRow {
            iteration: it,
            sim_time_s: time,
            bottleneck_stage: stage,
            flops_total,
            activation_bytes_max: act_max,
            tokens_per_s,
            degradation_pct: degradation(tokens_per_s, fault_free_tokens_per_s),
        });
    }

    let tokens_per_s = rows.last().map_or(fault_free_tokens_per_s, |r| r.tokens_per_s);
    Ok(CostReport {
        policy,
        fault_free_iteration_s,
        fault_free_tokens_per_s,
        tokens_per_s,
        degradation_pct: degradation(tokens_per_s, fault_free_tokens_per_s),
        fetch_events,
        failures,
        peak_nodes: peak.1,
        rows,
    })
}

/// Everything `simulate_throughput` needs, as read from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub dp: usize,
    pub pp: usize,
    pub scenario: FailureScenario,
    pub inputs: CostInputs,
    pub iterations: u64,
    pub policies: Vec<FailurePolicy>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            dp: 4,
            pp: 8,
            scenario: FailureScenario::scheduled(crate::cluster::FailureLevel::High, 0),
            inputs: CostInputs::reference(),
            iterations: 20_000,
            policies: vec![
                FailurePolicy::Mecefo,
                FailurePolicy::NeighborNaive,
                FailurePolicy::CheckpointRestart,
            ],
        }
    }
}

impl SimulationConfig {
    pub fn cluster(&self) -> Result<ClusterConfig> {
        ClusterConfig::contiguous(self.dp, self.pp, self.inputs.model.layers)
    }

    /// One report per configured policy, all replaying the same scenario.
    pub fn run(&self) -> Result<Vec<CostReport>> {
        let cluster = self.cluster()?;
        self.policies
            .iter()
            .map(|&p| simulate_throughput(&cluster, &self.scenario, &self.inputs, self.iterations, p))
            .collect()
    }
}

fn degradation(tokens_per_s: f64, reference: f64) -> f64 {
    // Clamp float noise so fault-free runs report exactly zero.
    let d = (1.0 - tokens_per_s / reference) * 100.0;
    if d.abs() < 1e-9 {
        0.0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::FailureLevel;

    #[test]
    fn linear_flop_examples() {
        assert_eq!(linear_flops(64, 32, 32, LinearOp::Wgrad), 131072);
        assert_eq!(linear_flops(64, 32, 32, LinearOp::ApproxWgrad(2)), 20480);
        for op in [LinearOp::Fprop, LinearOp::Dgrad, LinearOp::Rcomp] {
            assert_eq!(linear_flops(64, 32, 32, op), 131072);
        }
        assert!(linear_flops(64, 32, 32, LinearOp::ApproxWgrad(32)) >= 131072);
    }

    #[test]
    fn rcomp_is_a_third_of_ffn_baseline() {
        let cfg = ModelConfig::default();
        let std = block_cost(&cfg, BlockMode::Standard, 4, 100, 64).unwrap();
        let mec = block_cost(&cfg, BlockMode::NeighborMecefo, 4, 100, 64).unwrap();
        assert_eq!(mec.ffn.rcomp * 3.0, std.ffn.total());
        assert_eq!(mec.mha.backward(), 0.0);
        assert_eq!(mec.mha.fprop, std.mha.fprop);
        let total = mec.flops();
        assert!((total.total() - (mec.mha.total() + mec.ffn.total())).abs() < 1e-6);
    }

    #[test]
    fn mecefo_activations_ignore_ffn_width_and_heads() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.ffn_intermediate *= 4;
        b.heads = 8;
        let ca = block_cost(&a, BlockMode::NeighborMecefo, 4, 100, 64).unwrap();
        let cb = block_cost(&b, BlockMode::NeighborMecefo, 4, 100, 64).unwrap();
        assert_eq!(ca.activation_bytes, cb.activation_bytes);
        let sa = block_cost(&a, BlockMode::Standard, 4, 100, 64).unwrap();
        assert!(sa.activation_bytes > ca.activation_bytes);
    }

    #[test]
    fn mecefo_cheaper_than_naive() {
        let cfg = ModelConfig::default();
        let naive = block_cost(&cfg, BlockMode::NeighborNaive, 4, 100, 64).unwrap();
        for tau in [10, 100, 1000] {
            let mec = block_cost(&cfg, BlockMode::NeighborMecefo, 4, tau, 64).unwrap();
            assert!(mec.flops().total() <= naive.flops().total(), "tau {tau}");
        }
    }

    fn small_inputs() -> CostInputs {
        CostInputs {
            model: ModelConfig {
                layers: 8,
                ..ModelConfig::default()
            },
            tokens_per_rank: 256,
            rank: 4,
            tau: 100,
            node_flops_per_s: 1e6,
            fetch_cost_s: 0.0,
            microbatches: 4,
            checkpoint_interval_s: 100.0,
            restart_s: 50.0,
        }
    }

    #[test]
    fn fault_free_has_no_degradation() {
        let cluster = ClusterConfig::contiguous(2, 4, 8).unwrap();
        for policy in [FailurePolicy::Mecefo, FailurePolicy::NeighborNaive, FailurePolicy::CheckpointRestart] {
            let rep = simulate_throughput(&cluster, &FailureScenario::none(), &small_inputs(), 50, policy).unwrap();
            assert_eq!(rep.degradation_pct, 0.0);
            assert!(rep.rows.iter().all(|r| r.degradation_pct == 0.0));
        }
    }

    #[test]
    fn permanent_naive_doubling_doubles_iteration_time() {
        let cluster = ClusterConfig::contiguous(2, 4, 8).unwrap();
        let inputs = small_inputs();
        let table = CostTable::new(&inputs).unwrap();
        let mut state = ClusterState::new(cluster).unwrap();
        let base = bottleneck(&table.node_costs(&state, FailurePolicy::NeighborNaive)).0;
        state.mark_failed(NodeId { rank: 1, stage: 2 }, None);
        state.reassign_ndb(0.0, 0).unwrap();
        let (doubled, stage) = bottleneck(&table.node_costs(&state, FailurePolicy::NeighborNaive));
        assert_eq!(doubled, 2.0 * base);
        assert_eq!(stage, 3);
        let mec = bottleneck(&table.node_costs(&state, FailurePolicy::Mecefo)).0;
        assert!(mec < doubled);
    }

    #[test]
    fn report_components_are_consistent() {
        let cluster = ClusterConfig::contiguous(4, 8, 24).unwrap();
        let rep = simulate_throughput(
            &cluster,
            &FailureScenario::scheduled(FailureLevel::High, 1),
            &CostInputs::reference(),
            3000,
            FailurePolicy::Mecefo,
        )
        .unwrap();
        assert!(rep.failures > 0);
        for n in &rep.peak_nodes {
            let f = n.flops;
            for part in [f.fprop, f.wgrad, f.dgrad, f.rcomp, f.approx_wgrad, f.svd_amortized] {
                assert!(part >= 0.0);
            }
        }
        assert!(rep.rows.windows(2).all(|w| w[1].sim_time_s > w[0].sim_time_s));
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "iteration,sim_time_s,bottleneck_stage,flops_total,activation_bytes_max,tokens_per_s,degradation_pct\n"
        ));
    }
}
