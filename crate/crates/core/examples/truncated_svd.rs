// Top right singular vectors by block power iteration on `wᵀw`.

use mecefo::{seeded_gaussian, top_r_right_singular_vectors, Matrix, SvdConfig};

/// Fraction of `‖w‖²_F` captured by the projection onto the basis.
fn captured(w: &Matrix, v: &Matrix) -> mecefo::Result<f64> {
    Ok(w.matmul(v)?.frobenius_norm_sq() / w.frobenius_norm_sq())
}

pub fn run_example() -> mecefo::Result<f64> {
    // A matrix with a clear rank-3 signal plus small noise.
    let left = seeded_gaussian(32, 3, 0.0, 1.0, 10)?;
    let right = seeded_gaussian(3, 20, 0.0, 1.0, 11)?;
    let w = left.matmul(&right)?.add(&seeded_gaussian(32, 20, 0.0, 0.01, 12)?)?;

    let mut at_three = 0.0;
    for r in 1..=5 {
        let v = top_r_right_singular_vectors(&w, &SvdConfig::new(r))?;
        let orth = v.matmul_tn(&v)?.sub(&Matrix::identity(r))?.max_abs();
        let c = captured(&w, &v)?;
        println!("r = {r}  captured {:.6}  orthonormality defect {orth:.1e}", c);
        if r == 3 {
            at_three = c;
        }
    }
    Ok(at_three)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example().map(|_| ())
}
