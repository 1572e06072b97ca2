// Finite-difference check of the exact backward pass and comparison of the
// full-rank neighbor-mode backward with the detached-attention oracle.

use mecefo::harness::{check_gradients, GradCheckConfig, GradCheckReport};

pub fn run_example() -> mecefo::Result<GradCheckReport> {
    let report = check_gradients(&GradCheckConfig::default())?;
    for g in &report.groups {
        println!("{:<18} {:<12} {:.2e}", g.check, g.group, g.max_rel_err);
    }
    println!("passed: {}", report.passed());
    Ok(report)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example().map(|_| ())
}
