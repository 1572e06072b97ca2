// Momentum SGD with a biased, noisy gradient oracle on a quadratic: the
// averaged squared gradient norm shrinks with more iterations and more ranks.

use mecefo::optim::convergence::{mean_averaged_grad_norm, ConvergenceConfig, Quadratic};

pub fn run_example() -> mecefo::Result<Vec<(usize, usize, f64)>> {
    let objective = Quadratic::with_condition(16, 10.0, 3);
    let mut rows = Vec::new();
    for ranks in [2, 4] {
        for iterations in [250, 1000] {
            let cfg = ConvergenceConfig::tuned(&objective, ranks, iterations, 0.5, 1.0, 0);
            let g = mean_averaged_grad_norm(&objective, &cfg, 4)?;
            println!("n = {ranks}  T = {iterations:>4}  beta1 {:.4}  lr {:.4}  mean |grad|^2 {g:.4e}", cfg.beta1, cfg.lr);
            rows.push((ranks, iterations, g));
        }
    }
    Ok(rows)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example().map(|_| ())
}
