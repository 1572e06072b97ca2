// Low-rank weight gradient `G_y (xᵀ V1) V1ᵀ` against the exact `G_y xᵀ`,
// for a few projection ranks.

use mecefo::approx::lowrank_wgrad;
use mecefo::{seeded_gaussian, top_r_right_singular_vectors, SvdConfig};

pub fn run_example() -> mecefo::Result<Vec<(usize, f64)>> {
    let (m, n, b) = (24, 16, 64);
    let w = seeded_gaussian(m, n, 0.0, 1.0, 1)?;
    let g_y = seeded_gaussian(m, b, 0.0, 1.0, 2)?;
    let x = seeded_gaussian(n, b, 0.0, 1.0, 3)?;
    let exact = g_y.matmul_nt(&x)?;

    let mut errors = Vec::new();
    for r in [1, 2, 4, 8, 16] {
        let v1 = top_r_right_singular_vectors(&w, &SvdConfig::new(r))?;
        let approx = lowrank_wgrad(&g_y, &x, &v1)?;
        let rel = approx.sub(&exact)?.frobenius_norm() / exact.frobenius_norm();
        println!("r = {r:>2}  relative error {rel:.3e}");
        errors.push((r, rel));
    }
    Ok(errors)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example().map(|_| ())
}
