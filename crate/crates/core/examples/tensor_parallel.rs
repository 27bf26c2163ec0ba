//! Shards the block across simulated devices and compares the compound
//! scheme (one all-reduce) with per-GEMM all-gathers.

use deepfusion::executor::run_block;
use deepfusion::fused::{KernelConfig, TileConfig};
use deepfusion::swiglu::MlpWeights;
use deepfusion::tensor::Matrix;
use deepfusion::tp::{comm_volume, make_plan, run_naive_tp_mlp, run_tp_mlp, CommModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deepfusion::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = MlpWeights::random(128, 512, 0.1, &mut rng)?;
    let x = Matrix::random(4, 128, 1.0, &mut rng)?;
    let shape = w.shape(x.rows())?;
    let fused = KernelConfig::fused(TileConfig::single_tile(&shape));
    let single = run_block(&fused, &x, &w)?;

    println!("{shape}");
    for p in [1, 2, 4, 8] {
        let (y, log) = run_tp_mlp(&x, &w, &make_plan(shape.d_ff, p)?, &fused)?;
        let (_, naive) = run_naive_tp_mlp(&x, &w, p)?;
        println!(
            "P={p}: max diff {:.1e}; compound {} collective(s), {:.0} ring bytes; naive {} collective(s), {:.0} ring bytes",
            y.max_abs_diff(&single),
            log.len(),
            comm_volume(&log, p, CommModel::Ring, 2),
            naive.len(),
            comm_volume(&naive, p, CommModel::Ring, 2)
        );
    }
    Ok(())
}
