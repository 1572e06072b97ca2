//! DP × PP cluster model: node health, failure injection, neighbor-do-both
//! reassignment and recovery, per-layer active sets and gradient averaging.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{GradientSet, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub rank: usize,
    pub stage: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Healthy,
    Failed,
    /// Running its own stage plus one adopted from a failed node.
    NeighborDoubled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub dp: usize,
    pub pp: usize,
    /// Stage hosting each layer; contiguous and non-decreasing.
    pub layer_stage: Vec<usize>,
}

impl ClusterConfig {
    /// Splits `layers` into `pp` contiguous blocks, the first `layers % pp`
    /// one layer larger.
    pub fn contiguous(dp: usize, pp: usize, layers: usize) -> Result<Self> {
        if dp == 0 || pp == 0 || layers < pp {
            return Err(Error::Config(format!(
                "cannot place {layers} layers on {pp} stages with {dp} DP ranks"
            )));
        }
        let base = layers / pp;
        let extra = layers % pp;
        let mut layer_stage = Vec::with_capacity(layers);
        for stage in 0..pp {
            let count = base + usize::from(stage < extra);
            layer_stage.extend(std::iter::repeat(stage).take(count));
        }
        Ok(ClusterConfig { dp, pp, layer_stage })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dp == 0 || self.pp == 0 {
            return Err(Error::Config("dp and pp must be at least 1".into()));
        }
        let contiguous = self.layer_stage.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1);
        let covers = self.layer_stage.first() == Some(&0) && self.layer_stage.last() == Some(&(self.pp - 1));
        if !contiguous || !covers {
            return Err(Error::Config(format!(
                "layer_stage {:?} is not a contiguous cover of {} stages",
                self.layer_stage, self.pp
            )));
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.dp * self.pp
    }

    pub fn layers_of(&self, stage: usize) -> Vec<usize> {
        self.layer_stage
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s == stage)
            .map(|(l, _)| l)
            .collect()
    }

    /// Stage holding a parameter: embeddings on the first, the output head on
    /// the last.
    pub fn stage_of(&self, id: ParamId) -> usize {
        match id {
            ParamId::Embedding => 0,
            ParamId::Layer(l, _) => self.layer_stage[l],
            ParamId::FinalNorm | ParamId::Unembedding => self.pp - 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryTimer {
    AtTime(f64),
    AtIteration(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Failure,
    Recovery,
    /// A neighbor adopted a failed stage and fetched its weights and
    /// optimizer state from another DP rank.
    FailoverFetch,
    /// A recovered node fetched its weights and optimizer state back from the
    /// neighbor that covered for it.
    RecoveryFetch,
}

/// One line of the JSON-lines event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub iteration: u64,
    pub kind: EventKind,
    pub node: NodeId,
    pub details: serde_json::Value,
}

impl Event {
    pub fn is_fetch(&self) -> bool {
        matches!(self.kind, EventKind::FailoverFetch | EventKind::RecoveryFetch)
    }
}

pub fn write_events_jsonl<W: Write>(mut out: W, events: &[Event]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    cfg: ClusterConfig,
    status: Vec<NodeStatus>,
    /// Executing stage for each `(rank, stage)` workload.
    assignment: Vec<usize>,
    recovery: Vec<Option<RecoveryTimer>>,
}

impl ClusterState {
    pub fn new(cfg: ClusterConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.nodes();
        Ok(ClusterState {
            assignment: (0..n).map(|i| i % cfg.pp).collect(),
            status: vec![NodeStatus::Healthy; n],
            recovery: vec![None; n],
            cfg,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    fn idx(&self, node: NodeId) -> usize {
        node.rank * self.cfg.pp + node.stage
    }

    pub fn status(&self, node: NodeId) -> NodeStatus {
        self.status[self.idx(node)]
    }

    pub fn recovery_timer(&self, node: NodeId) -> Option<RecoveryTimer> {
        self.recovery[self.idx(node)]
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.cfg.dp).flat_map(move |rank| (0..self.cfg.pp).map(move |stage| NodeId { rank, stage }))
    }

    /// Node executing `stage`'s workload in `rank`.
    pub fn executor(&self, rank: usize, stage: usize) -> NodeId {
        NodeId {
            rank,
            stage: self.assignment[rank * self.cfg.pp + stage],
        }
    }

    /// Stage workloads run by `node`, in ascending stage order.
    pub fn workloads(&self, node: NodeId) -> Vec<usize> {
        (0..self.cfg.pp)
            .filter(|&s| self.assignment[node.rank * self.cfg.pp + s] == node.stage)
            .collect()
    }

    /// Whether `rank`'s node for `layer` runs in neighbor mode.
    pub fn layer_in_neighbor_mode(&self, rank: usize, layer: usize) -> bool {
        let node = self.executor(rank, self.cfg.layer_stage[layer]);
        self.status(node) == NodeStatus::NeighborDoubled
    }

    /// Ranks with at least one doubled node.
    pub fn affected_ranks(&self) -> Vec<usize> {
        (0..self.cfg.dp)
            .filter(|&rank| {
                (0..self.cfg.pp).any(|stage| self.status(NodeId { rank, stage }) == NodeStatus::NeighborDoubled)
            })
            .collect()
    }

    pub fn failed_count(&self) -> usize {
        self.status.iter().filter(|&&s| s == NodeStatus::Failed).count()
    }

    pub fn failed_in_rank(&self, rank: usize) -> usize {
        (0..self.cfg.pp)
            .filter(|&stage| self.status(NodeId { rank, stage }) == NodeStatus::Failed)
            .count()
    }

    /// Marks a node failed and arms its recovery timer. Does not reassign.
    pub fn mark_failed(&mut self, node: NodeId, timer: Option<RecoveryTimer>) {
        let i = self.idx(node);
        self.status[i] = NodeStatus::Failed;
        self.recovery[i] = timer;
    }

    /// Gives every workload whose executor has failed to the next eligible
    /// node of the same rank in ring order of stages. Workloads are handled
    /// from the highest stage down; a node is eligible when it is healthy and
    /// not already doubled. Adoption events carry the adopted layers so the
    /// caller can reset their local steps.
    pub fn reassign_ndb(&mut self, time: f64, iteration: u64) -> Result<Vec<Event>> {
        let pp = self.cfg.pp;
        let mut events = Vec::new();
        for rank in 0..self.cfg.dp {
            for stage in (0..pp).rev() {
                let exec = self.assignment[rank * pp + stage];
                if self.status[rank * pp + exec] != NodeStatus::Failed {
                    continue;
                }
                let adopter = (1..pp)
                    .map(|k| (stage + k) % pp)
                    .find(|&c| self.status[rank * pp + c] == NodeStatus::Healthy);
                let Some(adopter) = adopter else {
                    return Err(Error::UnrecoverableRank {
                        rank,
                        detail: format!(
                            "stage {stage} lost its executor and no healthy, undoubled node remains ({} of {pp} failed)",
                            self.failed_in_rank(rank)
                        ),
                    });
                };
                self.assignment[rank * pp + stage] = adopter;
                self.status[rank * pp + adopter] = NodeStatus::NeighborDoubled;
                let source = (1..self.cfg.dp)
                    .map(|k| (rank + k) % self.cfg.dp)
                    .find(|&r| self.status(self.executor(r, stage)) != NodeStatus::Failed);
                events.push(Event {
                    time,
                    iteration,
                    kind: EventKind::FailoverFetch,
                    node: NodeId { rank, stage: adopter },
                    details: json!({
                        "adopted_stage": stage,
                        "layers": self.cfg.layers_of(stage),
                        "source_rank": source,
                    }),
                });
            }
        }
        Ok(events)
    }

    /// Returns a failed node to service: its own stage moves back from the
    /// neighbor, which becomes healthy again unless it still covers another.
    pub fn recover_node(&mut self, node: NodeId, time: f64, iteration: u64) -> Vec<Event> {
        let pp = self.cfg.pp;
        let i = self.idx(node);
        let mut events = vec![Event {
            time,
            iteration,
            kind: EventKind::Recovery,
            node,
            details: json!({}),
        }];
        self.status[i] = NodeStatus::Healthy;
        self.recovery[i] = None;
        let holder = self.assignment[i];
        self.assignment[i] = node.stage;
        if holder != node.stage {
            let holder_node = NodeId {
                rank: node.rank,
                stage: holder,
            };
            if self.status(holder_node) == NodeStatus::NeighborDoubled && self.workloads(holder_node).len() == 1 {
                self.status[node.rank * pp + holder] = NodeStatus::Healthy;
            }
            events.push(Event {
                time,
                iteration,
                kind: EventKind::RecoveryFetch,
                node,
                details: json!({ "from_stage": holder, "layers": self.cfg.layers_of(node.stage) }),
            });
        }
        events
    }

    /// Nodes whose recovery timer has elapsed.
    pub fn due_recoveries(&self, time: f64, iteration: u64) -> Vec<NodeId> {
        self.node_ids()
            .filter(|&n| match self.recovery_timer(n) {
                Some(RecoveryTimer::AtTime(t)) => time >= t,
                Some(RecoveryTimer::AtIteration(it)) => iteration >= it,
                None => false,
            })
            .collect()
    }

    /// Ranks averaged for a parameter. Attention-group weights exclude ranks
    /// whose node for that layer is failed or doubled; everything else is
    /// averaged over all ranks.
    pub fn active_set(&self, id: ParamId) -> Vec<usize> {
        match id {
            ParamId::Layer(layer, kind) if kind.is_mha_group() => {
                let stage = self.cfg.layer_stage[layer];
                (0..self.cfg.dp)
                    .filter(|&r| self.status(self.executor(r, stage)) == NodeStatus::Healthy)
                    .collect()
            }
            _ => (0..self.cfg.dp).collect(),
        }
    }

    pub fn active_sets(&self, ids: &[ParamId]) -> ActiveSets {
        ids.iter().map(|&id| (id, self.active_set(id))).collect()
    }

    /// Checks that every workload runs on exactly one live node, no node runs
    /// more than two, and `NeighborDoubled` holds exactly for nodes running two.
    pub fn check_invariants(&self) -> Result<()> {
        for node in self.node_ids() {
            let status = self.status(node);
            let load = self.workloads(node).len();
            let ok = match status {
                NodeStatus::Failed => load == 0,
                NodeStatus::Healthy => load == 1,
                NodeStatus::NeighborDoubled => load == 2,
            };
            if !ok {
                return Err(Error::contract(
                    "cluster invariants",
                    format!("node {node:?} is {status:?} with {load} workloads"),
                ));
            }
        }
        Ok(())
    }
}

/// Averaging set per parameter.
pub type ActiveSets = BTreeMap<ParamId, Vec<usize>>;

/// `Ḡ = (1/|N|) Σ_{i∈N} Gᵢ`, summed in ascending rank order. Parameters with
/// an empty set are left out of the result (skip the update this step).
pub fn aggregate_gradients(per_rank: &[GradientSet], sets: &ActiveSets) -> Result<GradientSet> {
    let mut out = GradientSet::new();
    for (&id, ranks) in sets {
        if ranks.is_empty() {
            continue;
        }
        let mut acc: Option<Matrix> = None;
        for &rank in ranks {
            let g = per_rank
                .get(rank)
                .and_then(|set| set.get(id))
                .ok_or_else(|| Error::MissingGradient {
                    param: id.to_string(),
                    rank,
                })?;
            match acc.as_mut() {
                Some(a) => a.add_assign(g)?,
                None => acc = Some(g.clone()),
            }
        }
        let count = ranks.len() as f64;
        let sum = acc.expect("non-empty set");
        out.insert(id, sum.map(|v| v / count));
    }
    Ok(out)
}

/// How failures arrive.
#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioKind {
    None,
    /// One node fails every `failure_interval_s` simulated seconds and comes
    /// back `recovery_time_s` later.
    Scheduled { failure_interval_s: f64, recovery_time_s: f64 },
    /// Every live node fails independently with `probability` each iteration
    /// and returns after `recovery_iterations`.
    PerIteration { probability: f64, recovery_iterations: u64 },
    /// The listed nodes fail at the first boundary and never recover.
    Static { failed: Vec<NodeId> },
}

/// In JSON the kind's fields sit next to the common ones, e.g.
/// `{"kind": "per_iteration", "probability": 0.02, "recovery_iterations": 10, "seed": 3}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioRepr", into = "ScenarioRepr")]
pub struct FailureScenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// Failures that would push a rank past this many failed nodes are
    /// suppressed. `None` lets ranks become unrecoverable.
    pub max_failed_per_rank: Option<usize>,
    /// Restrict failures to this many nodes, drawn once from the seed.
    pub fixed_victims: Option<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ReprKind {
    None,
    Scheduled,
    PerIteration,
    Static,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRepr {
    kind: ReprKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failure_interval_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recovery_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recovery_iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failed: Option<Vec<NodeId>>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    max_failed_per_rank: Option<usize>,
    #[serde(default)]
    fixed_victims: Option<usize>,
}

impl TryFrom<ScenarioRepr> for FailureScenario {
    type Error = String;

    fn try_from(r: ScenarioRepr) -> std::result::Result<Self, String> {
        fn need<T>(v: Option<T>, field: &str, kind: &str) -> std::result::Result<T, String> {
            v.ok_or_else(|| format!("scenario kind {kind} needs `{field}`"))
        }
        let extra = |allowed: &[&str]| -> std::result::Result<(), String> {
            let present = [
                ("failure_interval_s", r.failure_interval_s.is_some()),
                ("recovery_time_s", r.recovery_time_s.is_some()),
                ("probability", r.probability.is_some()),
                ("recovery_iterations", r.recovery_iterations.is_some()),
                ("failed", r.failed.is_some()),
            ];
            match present.iter().find(|(name, set)| *set && !allowed.contains(name)) {
                Some((name, _)) => Err(format!("field `{name}` does not apply to this scenario kind")),
                None => Ok(()),
            }
        };
        let kind = match r.kind {
            ReprKind::None => {
                extra(&[])?;
                ScenarioKind::None
            }
            ReprKind::Scheduled => {
                extra(&["failure_interval_s", "recovery_time_s"])?;
                ScenarioKind::Scheduled {
                    failure_interval_s: need(r.failure_interval_s, "failure_interval_s", "scheduled")?,
                    recovery_time_s: need(r.recovery_time_s, "recovery_time_s", "scheduled")?,
                }
            }
            ReprKind::PerIteration => {
                extra(&["probability", "recovery_iterations"])?;
                ScenarioKind::PerIteration {
                    probability: need(r.probability, "probability", "per_iteration")?,
                    recovery_iterations: need(r.recovery_iterations, "recovery_iterations", "per_iteration")?,
                }
            }
            ReprKind::Static => {
                extra(&["failed"])?;
                ScenarioKind::Static {
                    failed: need(r.failed.clone(), "failed", "static")?,
                }
            }
        };
        Ok(FailureScenario {
            kind,
            seed: r.seed,
            max_failed_per_rank: r.max_failed_per_rank,
            fixed_victims: r.fixed_victims,
        })
    }
}

impl From<FailureScenario> for ScenarioRepr {
    fn from(s: FailureScenario) -> Self {
        let mut r = ScenarioRepr {
            kind: ReprKind::None,
            failure_interval_s: None,
            recovery_time_s: None,
            probability: None,
            recovery_iterations: None,
            failed: None,
            seed: s.seed,
            max_failed_per_rank: s.max_failed_per_rank,
            fixed_victims: s.fixed_victims,
        };
        match s.kind {
            ScenarioKind::None => {}
            ScenarioKind::Scheduled {
                failure_interval_s,
                recovery_time_s,
            } => {
                r.kind = ReprKind::Scheduled;
                r.failure_interval_s = Some(failure_interval_s);
                r.recovery_time_s = Some(recovery_time_s);
            }
            ScenarioKind::PerIteration {
                probability,
                recovery_iterations,
            } => {
                r.kind = ReprKind::PerIteration;
                r.probability = Some(probability);
                r.recovery_iterations = Some(recovery_iterations);
            }
            ScenarioKind::Static { failed } => {
                r.kind = ReprKind::Static;
                r.failed = Some(failed);
            }
        }
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureLevel {
    Low,
    Medium,
    High,
}

const HOUR: f64 = 3600.0;

impl FailureScenario {
    pub fn none() -> Self {
        FailureScenario {
            kind: ScenarioKind::None,
            seed: 0,
            max_failed_per_rank: None,
            fixed_victims: None,
        }
    }

    /// Interval/recovery pairs: low 2 h / 4 h, medium 1 h / 3 h, high 0.5 h / 2 h.
    pub fn scheduled(level: FailureLevel, seed: u64) -> Self {
        let (interval, recovery) = match level {
            FailureLevel::Low => (2.0 * HOUR, 4.0 * HOUR),
            FailureLevel::Medium => (HOUR, 3.0 * HOUR),
            FailureLevel::High => (0.5 * HOUR, 2.0 * HOUR),
        };
        FailureScenario {
            kind: ScenarioKind::Scheduled {
                failure_interval_s: interval,
                recovery_time_s: recovery,
            },
            seed,
            max_failed_per_rank: None,
            fixed_victims: None,
        }
    }

    pub fn per_iteration(probability: f64, recovery_iterations: u64, seed: u64) -> Self {
        FailureScenario {
            kind: ScenarioKind::PerIteration {
                probability,
                recovery_iterations,
            },
            seed,
            max_failed_per_rank: None,
            fixed_victims: None,
        }
    }

    pub fn static_failures(failed: Vec<NodeId>) -> Self {
        FailureScenario {
            kind: ScenarioKind::Static { failed },
            seed: 0,
            max_failed_per_rank: None,
            fixed_victims: None,
        }
    }

    pub fn with_rank_cap(mut self, cap: usize) -> Self {
        self.max_failed_per_rank = Some(cap);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ScenarioKind::None => true,
            ScenarioKind::Scheduled {
                failure_interval_s,
                recovery_time_s,
            } => failure_interval_s > 0.0 && recovery_time_s > 0.0,
            ScenarioKind::PerIteration {
                probability,
                recovery_iterations,
            } => (0.0..=1.0).contains(&probability) && recovery_iterations > 0,
            ScenarioKind::Static { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid failure scenario {:?}", self.kind)))
        }
    }

    pub fn is_fault_free(&self) -> bool {
        match self.kind {
            ScenarioKind::None => true,
            ScenarioKind::PerIteration { probability, .. } => probability == 0.0,
            ScenarioKind::Scheduled { .. } => false,
            ScenarioKind::Static { ref failed } => failed.is_empty(),
        }
    }
}

/// Stateful failure source for one run.
#[derive(Clone, Debug)]
pub struct FailureInjector {
    scenario: FailureScenario,
    rng: ChaCha8Rng,
    next_failure_time: f64,
    victims: Option<Vec<NodeId>>,
    started: bool,
}

impl FailureInjector {
    pub fn new(scenario: FailureScenario, cfg: &ClusterConfig) -> Result<Self> {
        scenario.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let victims = scenario.fixed_victims.map(|k| {
            let mut all: Vec<NodeId> = (0..cfg.dp)
                .flat_map(|rank| (0..cfg.pp).map(move |stage| NodeId { rank, stage }))
                .collect();
            all.shuffle(&mut rng);
            all.truncate(k);
            all.sort();
            all
        });
        let next_failure_time = match scenario.kind {
            ScenarioKind::Scheduled { failure_interval_s, .. } => failure_interval_s,
            _ => f64::INFINITY,
        };
        Ok(FailureInjector {
            scenario,
            rng,
            next_failure_time,
            victims,
            started: false,
        })
    }

    pub fn scenario(&self) -> &FailureScenario {
        &self.scenario
    }

    fn eligible(&self, state: &ClusterState, node: NodeId, extra_failed_in_rank: usize) -> bool {
        if state.status(node) == NodeStatus::Failed {
            return false;
        }
        if let Some(v) = &self.victims {
            if !v.contains(&node) {
                return false;
            }
        }
        match self.scenario.max_failed_per_rank {
            Some(cap) => state.failed_in_rank(node.rank) + extra_failed_in_rank < cap,
            None => true,
        }
    }

    /// Fails nodes according to the scenario at an iteration boundary and
    /// returns the failure events. Recovery and reassignment are separate.
    pub fn inject(&mut self, state: &mut ClusterState, time: f64, iteration: u64) -> Vec<Event> {
        let mut events = Vec::new();
        let first = !self.started;
        self.started = true;
        match self.scenario.kind.clone() {
            ScenarioKind::None => {}
            ScenarioKind::Static { failed } => {
                if first {
                    for node in failed {
                        if node.rank < state.config().dp && node.stage < state.config().pp {
                            state.mark_failed(node, None);
                            events.push(failure_event(time, iteration, node, json!({})));
                        }
                    }
                }
            }
            ScenarioKind::Scheduled {
                failure_interval_s,
                recovery_time_s,
            } => {
                while time >= self.next_failure_time {
                    let at = self.next_failure_time;
                    self.next_failure_time += failure_interval_s;
                    let candidates: Vec<NodeId> =
                        state.node_ids().filter(|&n| self.eligible(state, n, 0)).collect();
                    if let Some(&victim) = candidates.choose(&mut self.rng) {
                        state.mark_failed(victim, Some(RecoveryTimer::AtTime(at + recovery_time_s)));
                        events.push(failure_event(time, iteration, victim, json!({ "scheduled_at": at })));
                    }
                }
            }
            ScenarioKind::PerIteration {
                probability,
                recovery_iterations,
            } => {
                let nodes: Vec<NodeId> = state.node_ids().collect();
                for node in nodes {
                    // One draw per node regardless of status keeps runs with
                    // different probabilities on a shared uniform stream.
                    let hit = self.rng.gen::<f64>() < probability;
                    if hit && self.eligible(state, node, 0) {
                        state.mark_failed(node, Some(RecoveryTimer::AtIteration(iteration + recovery_iterations)));
                        events.push(failure_event(time, iteration, node, json!({})));
                    }
                }
            }
        }
        events
    }

    /// Full iteration-boundary update: due recoveries, new failures, then
    /// neighbor-do-both reassignment.
    pub fn step(&mut self, state: &mut ClusterState, time: f64, iteration: u64) -> Result<Vec<Event>> {
        let mut events = Vec::new();
        for node in state.due_recoveries(time, iteration) {
            events.extend(state.recover_node(node, time, iteration));
        }
        events.extend(self.inject(state, time, iteration));
        events.extend(state.reassign_ndb(time, iteration)?);
        Ok(events)
    }
}

fn failure_event(time: f64, iteration: u64, node: NodeId, details: serde_json::Value) -> Event {
    Event {
        time,
        iteration,
        kind: EventKind::Failure,
        node,
        details,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WeightKind;

    fn state(dp: usize, pp: usize) -> ClusterState {
        ClusterState::new(ClusterConfig::contiguous(dp, pp, pp).unwrap()).unwrap()
    }

    fn node(rank: usize, stage: usize) -> NodeId {
        NodeId { rank, stage }
    }

    #[test]
    fn contiguous_layout() {
        let cfg = ClusterConfig::contiguous(2, 3, 7).unwrap();
        assert_eq!(cfg.layer_stage, vec![0, 0, 0, 1, 1, 2, 2]);
        assert_eq!(cfg.layers_of(1), vec![3, 4]);
        assert!(ClusterConfig::contiguous(2, 4, 3).is_err());
        let bad = ClusterConfig {
            dp: 1,
            pp: 2,
            layer_stage: vec![1, 0],
        };
        assert!(ClusterState::new(bad).is_err());
    }

    #[test]
    fn no_failures_identity_assignment() {
        let mut s = state(2, 4);
        assert!(s.reassign_ndb(0.0, 0).unwrap().is_empty());
        for n in s.node_ids().collect::<Vec<_>>() {
            assert_eq!(s.status(n), NodeStatus::Healthy);
            assert_eq!(s.workloads(n), vec![n.stage]);
        }
    }

    #[test]
    fn single_failure_goes_to_ring_successor() {
        let mut s = state(1, 4);
        s.mark_failed(node(0, 1), None);
        let ev = s.reassign_ndb(0.0, 0).unwrap();
        assert_eq!(s.workloads(node(0, 2)), vec![1, 2]);
        assert_eq!(s.status(node(0, 2)), NodeStatus::NeighborDoubled);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, EventKind::FailoverFetch);
        s.check_invariants().unwrap();
    }

    #[test]
    fn cascade_skips_doubled_nodes() {
        let mut s = state(1, 4);
        s.mark_failed(node(0, 1), None);
        s.mark_failed(node(0, 2), None);
        s.reassign_ndb(0.0, 0).unwrap();
        assert_eq!(s.executor(0, 2), node(0, 3));
        assert_eq!(s.executor(0, 1), node(0, 0));
        s.check_invariants().unwrap();
    }

    #[test]
    fn last_stage_wraps_around() {
        let mut s = state(1, 4);
        s.mark_failed(node(0, 3), None);
        s.reassign_ndb(0.0, 0).unwrap();
        assert_eq!(s.executor(0, 3), node(0, 0));
    }

    #[test]
    fn unrecoverable_rank_is_reported() {
        let mut s = state(2, 4);
        for st in 0..3 {
            s.mark_failed(node(1, st), None);
        }
        match s.reassign_ndb(0.0, 0) {
            Err(Error::UnrecoverableRank { rank, .. }) => assert_eq!(rank, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fail_then_recover_round_trips() {
        let mut s = state(2, 4);
        let initial = s.clone();
        s.mark_failed(node(1, 2), Some(RecoveryTimer::AtIteration(5)));
        s.reassign_ndb(0.0, 0).unwrap();
        assert_eq!(s.due_recoveries(0.0, 4), vec![]);
        assert_eq!(s.due_recoveries(0.0, 5), vec![node(1, 2)]);
        let ev = s.recover_node(node(1, 2), 0.0, 5);
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[1].kind, EventKind::RecoveryFetch);
        assert_eq!(s, initial);
    }

    #[test]
    fn partial_recovery_keeps_other_neighbor_doubled() {
        let mut s = state(1, 4);
        s.mark_failed(node(0, 1), None);
        s.mark_failed(node(0, 2), None);
        s.reassign_ndb(0.0, 0).unwrap();
        s.recover_node(node(0, 2), 0.0, 1);
        assert_eq!(s.status(node(0, 3)), NodeStatus::Healthy);
        assert_eq!(s.status(node(0, 0)), NodeStatus::NeighborDoubled);
        assert_eq!(s.workloads(node(0, 0)), vec![0, 1]);
        s.check_invariants().unwrap();
    }

    #[test]
    fn active_sets_follow_affected_ranks() {
        let mut s = state(4, 2);
        for id in [ParamId::Layer(0, WeightKind::Q), ParamId::Layer(1, WeightKind::Gate)] {
            assert_eq!(s.active_set(id), vec![0, 1, 2, 3]);
        }
        // Rank 1's stage 1 fails; stage 0 doubles.
        s.mark_failed(node(1, 1), None);
        s.reassign_ndb(0.0, 0).unwrap();
        for layer in 0..2 {
            assert_eq!(s.active_set(ParamId::Layer(layer, WeightKind::O)), vec![0, 2, 3]);
            assert_eq!(s.active_set(ParamId::Layer(layer, WeightKind::NormAttn)), vec![0, 2, 3]);
            assert_eq!(s.active_set(ParamId::Layer(layer, WeightKind::Down)), vec![0, 1, 2, 3]);
        }
        assert_eq!(s.active_set(ParamId::Embedding), vec![0, 1, 2, 3]);
        assert_eq!(s.affected_ranks(), vec![1]);
    }

    #[test]
    fn every_rank_affected_empties_mha_set() {
        let mut s = state(2, 2);
        s.mark_failed(node(0, 0), None);
        s.mark_failed(node(1, 1), None);
        s.reassign_ndb(0.0, 0).unwrap();
        assert!(s.active_set(ParamId::Layer(0, WeightKind::K)).is_empty());
    }

    fn scalar(v: f64) -> GradientSet {
        let mut g = GradientSet::new();
        g.insert(ParamId::Layer(0, WeightKind::Q), Matrix::filled(1, 1, v));
        g
    }

    #[test]
    fn weighted_mean_over_active_ranks() {
        let per_rank: Vec<_> = [1.0, 2.0, 3.0, 4.0].into_iter().map(scalar).collect();
        let id = ParamId::Layer(0, WeightKind::Q);
        let sets: ActiveSets = [(id, vec![0, 1, 3])].into();
        let avg = aggregate_gradients(&per_rank, &sets).unwrap();
        assert!((avg.get(id).unwrap()[(0, 0)] - 7.0 / 3.0).abs() < 1e-15);

        let single: ActiveSets = [(id, vec![2])].into();
        assert_eq!(aggregate_gradients(&per_rank, &single).unwrap().get(id).unwrap()[(0, 0)], 3.0);

        let empty: ActiveSets = [(id, vec![])].into();
        assert!(aggregate_gradients(&per_rank, &empty).unwrap().get(id).is_none());
    }

    #[test]
    fn missing_gradient_in_active_set_is_an_error() {
        let id = ParamId::Layer(0, WeightKind::Q);
        let per_rank = vec![scalar(1.0), GradientSet::new()];
        let sets: ActiveSets = [(id, vec![0, 1])].into();
        assert!(matches!(
            aggregate_gradients(&per_rank, &sets),
            Err(Error::MissingGradient { rank: 1, .. })
        ));
    }

    #[test]
    fn zero_probability_never_fails() {
        let cfg = ClusterConfig::contiguous(4, 8, 8).unwrap();
        let mut s = ClusterState::new(cfg.clone()).unwrap();
        let mut inj = FailureInjector::new(FailureScenario::per_iteration(0.0, 3, 1), &cfg).unwrap();
        for it in 0..1000 {
            assert!(inj.step(&mut s, 0.0, it).unwrap().is_empty());
        }
    }

    #[test]
    fn certain_failure_hits_every_node() {
        let cfg = ClusterConfig::contiguous(4, 8, 8).unwrap();
        let mut s = ClusterState::new(cfg.clone()).unwrap();
        let mut inj = FailureInjector::new(FailureScenario::per_iteration(1.0, 3, 1), &cfg).unwrap();
        let ev = inj.inject(&mut s, 0.0, 0);
        assert_eq!(ev.len(), 32);
        assert!(ev.iter().all(|e| e.kind == EventKind::Failure));
        assert!(matches!(s.reassign_ndb(0.0, 0), Err(Error::UnrecoverableRank { .. })));
    }

    #[test]
    fn rank_cap_keeps_ranks_recoverable() {
        let cfg = ClusterConfig::contiguous(2, 4, 4).unwrap();
        let mut s = ClusterState::new(cfg.clone()).unwrap();
        let mut inj =
            FailureInjector::new(FailureScenario::per_iteration(1.0, 3, 1).with_rank_cap(2), &cfg).unwrap();
        inj.step(&mut s, 0.0, 0).unwrap();
        assert_eq!(s.failed_in_rank(0), 2);
        assert_eq!(s.failed_in_rank(1), 2);
        s.check_invariants().unwrap();
    }

    #[test]
    fn scheduled_failures_follow_the_clock() {
        let cfg = ClusterConfig::contiguous(4, 8, 8).unwrap();
        let mut s = ClusterState::new(cfg.clone()).unwrap();
        let mut inj = FailureInjector::new(FailureScenario::scheduled(FailureLevel::High, 9), &cfg).unwrap();
        assert!(inj.step(&mut s, 1799.0, 0).unwrap().is_empty());
        let ev = inj.step(&mut s, 1800.0, 1).unwrap();
        assert_eq!(ev.iter().filter(|e| e.kind == EventKind::Failure).count(), 1);
        assert_eq!(s.failed_count(), 1);
        // Two more boundaries crossed at once.
        let ev = inj.step(&mut s, 5400.0, 2).unwrap();
        assert_eq!(ev.iter().filter(|e| e.kind == EventKind::Failure).count(), 2);
        // First victim recovers two hours after it failed.
        let ev = inj.step(&mut s, 1800.0 + 7200.0, 3).unwrap();
        assert!(ev.iter().any(|e| e.kind == EventKind::Recovery));
        s.check_invariants().unwrap();
    }

    #[test]
    fn fixed_victims_limit_who_fails() {
        let cfg = ClusterConfig::contiguous(4, 8, 8).unwrap();
        let mut scenario = FailureScenario::per_iteration(0.5, 1, 3);
        scenario.fixed_victims = Some(5);
        let mut inj = FailureInjector::new(scenario, &cfg).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        let mut s = ClusterState::new(cfg).unwrap();
        for it in 0..200 {
            for e in inj.step(&mut s, 0.0, it).unwrap() {
                if e.kind == EventKind::Failure {
                    seen.insert(e.node);
                }
            }
        }
        assert_eq!(seen.len(), 5);
    }

    #[test]
    fn scenario_json_round_trips_and_rejects_strays() {
        let s = FailureScenario::per_iteration(0.02, 10, 3).with_rank_cap(2);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<FailureScenario>(&text).unwrap(), s);
        let sched: FailureScenario =
            serde_json::from_str(r#"{"kind": "scheduled", "failure_interval_s": 60, "recovery_time_s": 120}"#).unwrap();
        assert!(!sched.is_fault_free());
        for bad in [
            r#"{"kind": "scheduled", "probability": 0.1}"#,
            r#"{"kind": "per_iteration", "probability": 0.1}"#,
            r#"{"kind": "none", "typo": 1}"#,
        ] {
            assert!(serde_json::from_str::<FailureScenario>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn event_log_is_json_lines() {
        let mut s = state(1, 2);
        s.mark_failed(node(0, 0), None);
        let ev = s.reassign_ndb(12.5, 3).unwrap();
        let mut buf = Vec::new();
        write_events_jsonl(&mut buf, &ev).unwrap();
        let line = String::from_utf8(buf).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(v["kind"], "failover_fetch");
        assert_eq!(v["iteration"], 3);
        assert_eq!(v["node"]["stage"], 1);
        assert_eq!(v["details"]["adopted_stage"], 0);
    }
}
