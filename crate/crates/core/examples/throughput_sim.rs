// Throughput under the three failure-frequency presets for each policy.

use mecefo::cluster::{FailureLevel, FailureScenario};
use mecefo::costmodel::{FailurePolicy, SimulationConfig};

pub fn run_example() -> mecefo::Result<Vec<(FailureLevel, FailurePolicy, f64)>> {
    let mut rows = Vec::new();
    for level in [FailureLevel::Low, FailureLevel::Medium, FailureLevel::High] {
        let cfg = SimulationConfig {
            scenario: FailureScenario::scheduled(level, 1),
            iterations: 10_000,
            ..SimulationConfig::default()
        };
        for report in cfg.run()? {
            println!(
                "{level:?} {:?}: {:.0} tokens/s, degradation {:.2}%",
                report.policy, report.tokens_per_s, report.degradation_pct
            );
            rows.push((level, report.policy, report.degradation_pct));
        }
    }
    Ok(rows)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example().map(|_| ())
}
