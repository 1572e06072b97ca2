// Neighbor-do-both reassignment inside one DP rank: cascades, recovery and
// the event log.

use mecefo::cluster::{write_events_jsonl, ClusterConfig, ClusterState, NodeId, NodeStatus};

fn show(state: &ClusterState, rank: usize) {
    let pp = state.config().pp;
    let row: Vec<String> = (0..pp)
        .map(|stage| {
            let node = NodeId { rank, stage };
            match state.status(node) {
                NodeStatus::Failed => format!("s{stage}:down"),
                _ => format!("s{stage}:{:?}", state.workloads(node)),
            }
        })
        .collect();
    println!("  {}", row.join("  "));
}

pub fn run_example() -> mecefo::Result<ClusterState> {
    let mut state = ClusterState::new(ClusterConfig::contiguous(2, 4, 8)?)?;
    let mut events = Vec::new();

    println!("stages 1 and 2 of rank 0 fail together");
    state.mark_failed(NodeId { rank: 0, stage: 1 }, None);
    state.mark_failed(NodeId { rank: 0, stage: 2 }, None);
    events.extend(state.reassign_ndb(0.0, 10)?);
    show(&state, 0);

    println!("stage 2 comes back");
    events.extend(state.recover_node(NodeId { rank: 0, stage: 2 }, 60.0, 20));
    show(&state, 0);
    state.check_invariants()?;

    println!("stage 0, now covering stage 1, fails as well");
    state.mark_failed(NodeId { rank: 0, stage: 0 }, None);
    events.extend(state.reassign_ndb(90.0, 30)?);
    show(&state, 0);

    let mut log = Vec::new();
    write_events_jsonl(&mut log, &events)?;
    print!("{}", String::from_utf8_lossy(&log));
    Ok(state)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example().map(|_| ())
}
