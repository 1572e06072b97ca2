// FLOPs and activation bytes of one block in each execution mode.

use mecefo::costmodel::{block_cost, linear_flops, BlockCost, BlockMode, LinearOp};
use mecefo::model::ModelConfig;

pub fn run_example() -> mecefo::Result<Vec<(BlockMode, BlockCost)>> {
    println!("exact Wgrad 64x32x32: {}", linear_flops(64, 32, 32, LinearOp::Wgrad));
    println!("rank-2 Wgrad 64x32x32: {}", linear_flops(64, 32, 32, LinearOp::ApproxWgrad(2)));

    let cfg = ModelConfig {
        hidden: 1024,
        heads: 16,
        ffn_intermediate: 2752,
        seq_len: 1024,
        ..ModelConfig::default()
    };
    let mut out = Vec::new();
    for mode in [BlockMode::Standard, BlockMode::NeighborMecefo] {
        let c = block_cost(&cfg, mode, 64, 200, 16 * 1024)?;
        let f = c.flops();
        println!(
            "{mode:?}: total {:.3e}  fprop {:.2e}  wgrad {:.2e}  dgrad {:.2e}  rcomp {:.2e}  approx {:.2e}  svd {:.2e}  activations {:.1} MiB",
            f.total(),
            f.fprop,
            f.wgrad,
            f.dgrad,
            f.rcomp,
            f.approx_wgrad,
            f.svd_amortized,
            c.activation_bytes / (1024.0 * 1024.0)
        );
        out.push((mode, c));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> mecefo::Result<()> {
    run_example().map(|_| ())
}
