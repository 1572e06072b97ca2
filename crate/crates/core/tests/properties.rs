use std::collections::BTreeMap;

use mecefo::cluster::{
    aggregate_gradients, ClusterConfig, ClusterState, FailureInjector, FailureScenario, NodeId, NodeStatus,
};
use mecefo::model::{GradientSet, ParamId, WeightKind};
use mecefo::{Error, Matrix};
use proptest::prelude::*;

/// Ring rule written out directly: failed stages, highest first, go to the
/// next stage that is neither failed nor already covering another.
fn ring_rule(failed: &[bool]) -> Option<Vec<usize>> {
    let pp = failed.len();
    let mut exec: Vec<usize> = (0..pp).collect();
    let mut doubled = vec![false; pp];
    for s in (0..pp).rev().filter(|&s| failed[s]) {
        let mut found = None;
        for k in 1..pp {
            let c = (s + k) % pp;
            if !failed[c] && !doubled[c] {
                found = Some(c);
                break;
            }
        }
        let c = found?;
        exec[s] = c;
        doubled[c] = true;
    }
    Some(exec)
}

#[test]
fn reassignment_agrees_with_enumerated_ring_rule() {
    for pp in 2..=6 {
        for pattern in 0u32..(1 << pp) {
            let failed: Vec<bool> = (0..pp).map(|s| pattern >> s & 1 == 1).collect();
            let mut state = ClusterState::new(ClusterConfig::contiguous(1, pp, pp).unwrap()).unwrap();
            for s in (0..pp).filter(|&s| failed[s]) {
                state.mark_failed(NodeId { rank: 0, stage: s }, None);
            }
            let got = state.reassign_ndb(0.0, 0);
            match ring_rule(&failed) {
                Some(exec) => {
                    got.unwrap();
                    state.check_invariants().unwrap();
                    for (s, &e) in exec.iter().enumerate() {
                        assert_eq!(state.executor(0, s).stage, e, "pp {pp} pattern {pattern:b} stage {s}");
                    }
                }
                None => assert!(matches!(got, Err(Error::UnrecoverableRank { rank: 0, .. })), "pattern {pattern:b}"),
            }
        }
    }
}

#[test]
fn two_adjacent_failures_cascade_around_the_ring() {
    let mut state = ClusterState::new(ClusterConfig::contiguous(1, 4, 4).unwrap()).unwrap();
    state.mark_failed(NodeId { rank: 0, stage: 1 }, None);
    state.mark_failed(NodeId { rank: 0, stage: 2 }, None);
    state.reassign_ndb(0.0, 0).unwrap();
    assert_eq!(state.executor(0, 2).stage, 3);
    assert_eq!(state.executor(0, 1).stage, 0);
}

#[test]
fn per_iteration_failure_rate_matches_expectation() {
    let cfg = ClusterConfig::contiguous(4, 8, 8).unwrap();
    let mut injector = FailureInjector::new(FailureScenario::per_iteration(0.1, 1, 42), &cfg).unwrap();
    let iterations = 100_000;
    let mut total = 0usize;
    for it in 0..iterations {
        let mut state = ClusterState::new(cfg.clone()).unwrap();
        total += injector.inject(&mut state, 0.0, it).len();
    }
    let mean = total as f64 / iterations as f64;
    assert!((mean - 3.2).abs() <= 0.032, "mean {mean}");
}

#[test]
fn certain_failure_hits_every_node_once() {
    let cfg = ClusterConfig::contiguous(4, 8, 8).unwrap();
    let mut injector = FailureInjector::new(FailureScenario::per_iteration(1.0, 1, 0), &cfg).unwrap();
    let mut state = ClusterState::new(cfg).unwrap();
    assert_eq!(injector.inject(&mut state, 0.0, 0).len(), 32);
    assert_eq!(state.failed_count(), 32);
}

#[derive(Clone, Debug)]
enum Op {
    Fail(usize, usize),
    Recover(usize, usize),
}

fn op(dp: usize, pp: usize) -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..dp, 0..pp).prop_map(|(r, s)| Op::Fail(r, s)),
        (0..dp, 0..pp).prop_map(|(r, s)| Op::Recover(r, s)),
    ]
}

proptest! {
    #[test]
    fn random_fail_recover_sequences_keep_every_stage_assigned(ops in prop::collection::vec(op(3, 5), 1..60)) {
        let mut state = ClusterState::new(ClusterConfig::contiguous(3, 5, 10).unwrap()).unwrap();
        for (it, o) in ops.into_iter().enumerate() {
            match o {
                Op::Fail(rank, stage) => {
                    let node = NodeId { rank, stage };
                    if state.status(node) == NodeStatus::Failed {
                        continue;
                    }
                    let mut trial = state.clone();
                    trial.mark_failed(node, None);
                    // Failures that would leave a rank without a live node
                    // abort a run; the generator just skips them.
                    if trial.reassign_ndb(0.0, it as u64).is_ok() {
                        state = trial;
                    }
                }
                Op::Recover(rank, stage) => {
                    let node = NodeId { rank, stage };
                    if state.status(node) == NodeStatus::Failed {
                        state.recover_node(node, 0.0, it as u64);
                    }
                }
            }
            state.check_invariants().unwrap();
            for rank in 0..3 {
                let mut covered: Vec<usize> = (0..5)
                    .flat_map(|s| state.workloads(NodeId { rank, stage: s }))
                    .collect();
                covered.sort();
                prop_assert_eq!(covered, (0..5).collect::<Vec<_>>());
                for s in 0..5 {
                    prop_assert_ne!(state.status(state.executor(rank, s)), NodeStatus::Failed);
                }
            }
        }
    }

    #[test]
    fn fail_then_recover_restores_initial_state(rank in 0usize..3, stage in 0usize..5) {
        let initial = ClusterState::new(ClusterConfig::contiguous(3, 5, 5).unwrap()).unwrap();
        let mut state = initial.clone();
        let node = NodeId { rank, stage };
        state.mark_failed(node, None);
        state.reassign_ndb(0.0, 0).unwrap();
        state.recover_node(node, 1.0, 1);
        for n in initial.node_ids() {
            prop_assert_eq!(state.status(n), NodeStatus::Healthy);
            prop_assert_eq!(state.workloads(n), initial.workloads(n));
        }
    }

    #[test]
    fn aggregation_is_the_uniform_mean_over_the_active_set(
        values in prop::collection::vec(-1e3f64..1e3, 6),
        mask in prop::collection::vec(any::<bool>(), 6),
    ) {
        let id = ParamId::Layer(0, WeightKind::Q);
        let active: Vec<usize> = (0..6).filter(|&r| mask[r]).collect();
        let per_rank: Vec<GradientSet> = (0..6)
            .map(|r| {
                let mut g = GradientSet::new();
                // Excluded ranks carry poison; it must never reach the result.
                let v = if mask[r] { values[r] } else { f64::NAN };
                g.insert(id, Matrix::filled(2, 2, v));
                g
            })
            .collect();
        let sets = BTreeMap::from([(id, active.clone())]);
        let avg = aggregate_gradients(&per_rank, &sets).unwrap();
        if active.is_empty() {
            prop_assert!(avg.get(id).is_none());
        } else {
            let want = active.iter().map(|&r| values[r]).sum::<f64>() / active.len() as f64;
            let got = avg.get(id).unwrap();
            prop_assert!(got.is_finite());
            prop_assert!(got.as_slice().iter().all(|&v| (v - want).abs() <= 1e-12 * want.abs().max(1.0)));
        }
    }

    #[test]
    fn full_active_set_is_the_plain_mean(values in prop::collection::vec(-1e3f64..1e3, 1..8)) {
        let n = values.len();
        let id = ParamId::Layer(1, WeightKind::Up);
        let per_rank: Vec<GradientSet> = values
            .iter()
            .map(|&v| {
                let mut g = GradientSet::new();
                g.insert(id, Matrix::filled(1, 3, v));
                g
            })
            .collect();
        let sets = BTreeMap::from([(id, (0..n).collect())]);
        let avg = aggregate_gradients(&per_rank, &sets).unwrap();
        let mut sum = 0.0;
        for v in &values {
            sum += v;
        }
        prop_assert_eq!(avg.get(id).unwrap()[(0, 0)], sum / n as f64);
    }

    #[test]
    fn mha_sets_exclude_exactly_the_ranks_with_a_degraded_executor(
        failures in prop::collection::vec((0usize..4, 0usize..4), 0..4),
    ) {
        let mut state = ClusterState::new(ClusterConfig::contiguous(4, 4, 8).unwrap()).unwrap();
        for (rank, stage) in failures {
            if state.failed_in_rank(rank) < 2 {
                state.mark_failed(NodeId { rank, stage }, None);
            }
        }
        state.reassign_ndb(0.0, 0).unwrap();
        for layer in 0..8 {
            let stage = layer / 2;
            let healthy: Vec<usize> = (0..4)
                .filter(|&r| state.status(state.executor(r, stage)) == NodeStatus::Healthy)
                .collect();
            prop_assert_eq!(state.active_set(ParamId::Layer(layer, WeightKind::K)), healthy.clone());
            prop_assert_eq!(state.active_set(ParamId::Layer(layer, WeightKind::NormAttn)), healthy);
            prop_assert_eq!(state.active_set(ParamId::Layer(layer, WeightKind::Gate)), vec![0, 1, 2, 3]);
        }
        prop_assert_eq!(state.active_set(ParamId::Embedding), vec![0, 1, 2, 3]);
    }
}
