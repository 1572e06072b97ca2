// Short character-level training run with random node failures, next to
// the same run without failures.

use mecefo::cluster::FailureScenario;
use mecefo::harness::{run_training, RunConfig};

pub fn run_example(iterations: u64) -> mecefo::Result<(f64, f64)> {
    let base = RunConfig {
        iterations,
        ..RunConfig::default()
    };
    let clean = run_training(base.clone())?;
    let faulty = run_training(RunConfig {
        scenario: FailureScenario::per_iteration(0.02, 3, 7).with_rank_cap(2),
        ..base
    })?;
    let failures = faulty.events.iter().filter(|e| e.kind == mecefo::cluster::EventKind::Failure).count();
    println!("fault-free eval loss {:.4}", clean.eval_loss);
    println!("with {failures} failures  {:.4} ({} SVD calls)", faulty.eval_loss, faulty.svd_calls);
    Ok((clean.eval_loss, faulty.eval_loss))
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example(600).map(|_| ())
}
