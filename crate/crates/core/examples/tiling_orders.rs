//! Compares row-major and column-major tile loops: identical outputs,
//! different operand reuse.

use deepfusion::fused::{fused_stage1, predicted_reuse_counts, LoopOrder, TileConfig};
use deepfusion::swiglu::MlpWeights;
use deepfusion::tensor::{Matrix, MlpShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deepfusion::Result<()> {
    let shape = MlpShape::new(8, 96, 384)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = MlpWeights::random(shape.d_model, shape.d_ff, 0.1, &mut rng)?;
    let x = Matrix::random(shape.batch, shape.d_model, 1.0, &mut rng)?;

    let baseline = fused_stage1(&x, &w, &TileConfig::single_tile(&shape))?;
    println!("{shape}");
    println!("{:<24} {:>8} {:>10} {:>10}", "tile", "X reads", "W reads", "max diff");
    for order in [LoopOrder::RowMajorTiling, LoopOrder::ColumnMajorTiling] {
        for (m, n, k) in [(1, 32, 32), (4, 128, 96), (8, 384, 16)] {
            let tile = TileConfig::new(m, n, k, order)?;
            let reuse = predicted_reuse_counts(&shape, &tile);
            let a2 = fused_stage1(&x, &w, &tile)?;
            println!("{:<24} {:>8} {:>10} {:>10.1e}", tile.label(), reuse.x_reads, reuse.weight_reads, a2.max_abs_diff(&baseline));
        }
    }
    Ok(())
}
