// Relative gradient error of the neighbor-mode update while one of four
// ranks has a failed node.

use mecefo::cluster::{FailureScenario, NodeId};
use mecefo::harness::{check_assumption, AssumptionReport, RunConfig};

pub fn run_example(iterations: u64) -> mecefo::Result<AssumptionReport> {
    let mut cfg = RunConfig {
        iterations,
        scenario: FailureScenario::static_failures(vec![NodeId { rank: 3, stage: 1 }]),
        ..RunConfig::default()
    };
    cfg.probe.rho2_every = 50;
    let report = check_assumption(cfg)?;
    println!(
        "probed {} iterations: max rho1 {:.3}, mean rho1 {:.3}, max rho2 {:.3}",
        report.probed_iterations,
        report.max_rho1.unwrap_or(0.0),
        report.mean_rho1.unwrap_or(0.0),
        report.max_rho2.unwrap_or(0.0)
    );
    Ok(report)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example(500).map(|_| ())
}
