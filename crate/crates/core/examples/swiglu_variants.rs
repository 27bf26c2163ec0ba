//! Runs the three stage-1 layouts on the same input and shows which
//! intermediates each one materializes.

use deepfusion::executor::run_block;
use deepfusion::fused::{KernelConfig, TileConfig};
use deepfusion::swiglu::MlpWeights;
use deepfusion::tensor::{AccessLedger, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> deepfusion::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let weights = MlpWeights::random(64, 256, 0.1, &mut rng)?;
    let x = Matrix::random(4, 64, 1.0, &mut rng)?;
    let shape = weights.shape(x.rows())?;

    let configs = [KernelConfig::four_kernel(), KernelConfig::two_kernel(), KernelConfig::fused(TileConfig::single_tile(&shape))];
    let reference = run_block(&configs[0], &x, &weights)?;
    for config in &configs {
        let ledger = AccessLedger::new();
        let mut w = weights.clone();
        w.instrument(&ledger);
        let y = run_block(config, &x.clone().instrumented(&ledger, "X"), &w)?;
        let buffers: Vec<String> = ledger.names().into_iter().collect();
        println!(
            "{:<26} max |Y - Y_four| = {:.1e}  global elements moved = {:>6}  buffers: {}",
            config.label,
            y.max_abs_diff(&reference),
            ledger.total(),
            buffers.join(",")
        );
    }
    Ok(())
}
