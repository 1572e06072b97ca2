// Per-parameter averaging over active ranks: attention weights of a layer
// whose node is doubled are averaged over the remaining ranks only.

use mecefo::cluster::{aggregate_gradients, ClusterConfig, ClusterState, NodeId};
use mecefo::model::{GradientSet, ParamId, WeightKind};
use mecefo::Matrix;

pub fn run_example() -> mecefo::Result<GradientSet> {
    let mut state = ClusterState::new(ClusterConfig::contiguous(4, 2, 2)?)?;
    state.mark_failed(NodeId { rank: 2, stage: 0 }, None);
    state.reassign_ndb(0.0, 0)?;

    let q = ParamId::Layer(1, WeightKind::Q);
    let up = ParamId::Layer(1, WeightKind::Up);
    let per_rank: Vec<GradientSet> = (0..4)
        .map(|rank| {
            let mut g = GradientSet::new();
            let v = rank as f64 + 1.0;
            // The doubled rank has no attention gradient; poison it anyway
            // to show it never reaches the average.
            let qv = if rank == 2 { f64::NAN } else { v };
            g.insert(q, Matrix::filled(1, 1, qv));
            g.insert(up, Matrix::filled(1, 1, v));
            g
        })
        .collect();

    let sets = state.active_sets(&[q, up]);
    let avg = aggregate_gradients(&per_rank, &sets)?;
    for id in [q, up] {
        println!("{id:<14} ranks {:?}  mean {}", sets[&id], avg.get(id).expect("present")[(0, 0)]);
    }
    Ok(avg)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example().map(|_| ())
}
