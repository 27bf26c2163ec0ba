//! Predicted stage-1 traffic and arithmetic intensity across batch sizes,
//! checked against the instrumented executors.

use deepfusion::fused::TileConfig;
use deepfusion::swiglu::VariantTag;
use deepfusion::tensor::MlpShape;
use deepfusion::traffic::{arithmetic_intensity, predict_traffic, verify_against_instrumented};

fn main() -> deepfusion::Result<()> {
    println!("{:>5} {:>12} {:>14} {:>10} {:>9}", "batch", "variant", "stage-1 elems", "flop/byte", "observed");
    for batch in [1, 4, 16, 64] {
        let shape = MlpShape::new(batch, 512, 2048)?;
        let small = MlpShape::new(batch, 24, 96)?;
        for variant in VariantTag::ALL {
            let tile = (variant == VariantTag::Fused).then(|| TileConfig::single_tile(&shape));
            let report = predict_traffic(variant, &shape, tile.as_ref())?;
            let small_tile = (variant == VariantTag::Fused).then(|| TileConfig::single_tile(&small));
            let diff = verify_against_instrumented(variant, &small, small_tile.as_ref(), 0)?;
            println!(
                "{:>5} {:>12} {:>14} {:>10.3} {:>9}",
                batch,
                variant,
                report.stage1_elements,
                arithmetic_intensity(variant, &shape, tile.as_ref())?,
                if diff.is_empty() { "match" } else { "MISMATCH" }
            );
        }
    }
    Ok(())
}
