//! Dispatch from a [`KernelConfig`] to the matching stage-1 executor.

use crate::error::Result;
use crate::fused::{run_fused_stage1_impl, FusedMutant, KernelConfig};
use crate::swiglu::{buffers, down_projection, four_kernel_stage1, two_kernel_stage1, Accounting, MlpWeights, VariantTag};
use crate::tensor::Matrix;

/// Stage 1 (`A_2`) with the layout `config` names.
pub fn run_stage1(config: &KernelConfig, x: &Matrix, w: &MlpWeights) -> Result<Matrix> {
    run_stage1_with(config, x, w, None)
}

/// Stage 1 followed by the shared down projection.
pub fn run_block(config: &KernelConfig, x: &Matrix, w: &MlpWeights) -> Result<Matrix> {
    let a2 = run_stage1(config, x, w)?;
    down_projection(&a2, &w.w_down)
}

#[doc(hidden)]
pub fn run_stage1_with(config: &KernelConfig, x: &Matrix, w: &MlpWeights, mutant: Option<FusedMutant>) -> Result<Matrix> {
    config.validate()?;
    match config.variant {
        VariantTag::FourKernel => four_kernel_stage1(x, w, Accounting::Ideal),
        VariantTag::TwoKernel => two_kernel_stage1(x, w, Accounting::Ideal),
        VariantTag::Fused => {
            w.check_input(x)?;
            let tile = config.tile.expect("validated");
            let mut a2 = x.zeros_on_ledger_of(x.rows(), w.d_ff(), buffers::A_2)?;
            run_fused_stage1_impl(x, &w.w_up, &w.w_gate, &tile, &mut a2, 1, mutant)?;
            Ok(a2)
        }
    }
}

#[doc(hidden)]
pub fn run_block_with(config: &KernelConfig, x: &Matrix, w: &MlpWeights, mutant: Option<FusedMutant>) -> Result<Matrix> {
    let a2 = run_stage1_with(config, x, w, mutant)?;
    down_projection(&a2, &w.w_down)
}
