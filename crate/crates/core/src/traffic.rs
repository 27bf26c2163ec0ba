//! Analytic global-memory traffic for the three stage-1 layouts.
//!
//! Counts are logical element transfers at kernel boundaries under
//! ideal-reuse accounting: a naive kernel reads each input element once and
//! writes each output element once. The fused kernel's `X` and weight
//! multiplicities come from its tiling schedule
//! ([`predicted_reuse_counts`]). Bytes use a configurable element width,
//! 2 by default (FP16 storage) even though computation runs in `f64`.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::executor;
use crate::fused::{predicted_reuse_counts, FusedMutant, KernelConfig, TileConfig};
use crate::swiglu::{buffers, MlpWeights, VariantTag};
use crate::tensor::{AccessCount, AccessLedger, Matrix, MlpShape};

pub const DEFAULT_BYTES_PER_ELEMENT: u64 = 2;

/// Epilogue cost per element: SiLU (about 3) plus the gate multiply.
pub const SILU_FLOPS: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrafficReport {
    pub per_buffer: BTreeMap<String, AccessCount>,
    /// Stage-1 share of `total_elements` (everything except the down GEMM).
    pub stage1_elements: u64,
    pub total_elements: u64,
    pub total_bytes: u64,
    pub bytes_per_element: u64,
}

impl TrafficReport {
    fn from_buffers(per_buffer: BTreeMap<String, AccessCount>, stage2_elements: u64) -> Self {
        let total_elements = per_buffer.values().map(AccessCount::total).sum();
        Self {
            per_buffer,
            stage1_elements: total_elements - stage2_elements,
            total_elements,
            total_bytes: total_elements * DEFAULT_BYTES_PER_ELEMENT,
            bytes_per_element: DEFAULT_BYTES_PER_ELEMENT,
        }
    }

    pub fn with_bytes_per_element(mut self, bytes: u64) -> Self {
        self.bytes_per_element = bytes;
        self.total_bytes = self.total_elements * bytes;
        self
    }

    pub fn stage1_bytes(&self) -> u64 {
        self.stage1_elements * self.bytes_per_element
    }
}

fn stage2_elements(shape: &MlpShape) -> u64 {
    let (b, d, f) = (shape.batch as u64, shape.d_model as u64, shape.d_ff as u64);
    b * f + f * d + b * d
}

/// Predicted per-buffer traffic of one full block (stage 1 plus the shared
/// down projection). `tile` is required for, and only used by, `Fused`.
pub fn predict_traffic(variant: VariantTag, shape: &MlpShape, tile: Option<&TileConfig>) -> Result<TrafficReport> {
    let (b, d, f) = (shape.batch as u64, shape.d_model as u64, shape.d_ff as u64);
    let mut m = BTreeMap::new();
    let mut put = |name: &str, reads: u64, writes: u64| {
        m.insert(name.to_owned(), AccessCount::new(reads, writes));
    };
    match variant {
        VariantTag::FourKernel => {
            put(buffers::X, 2 * b * d, 0);
            put(buffers::W_GATE, d * f, 0);
            put(buffers::W_UP, d * f, 0);
            put(buffers::A_GATE, b * f, b * f);
            put(buffers::A_1, b * f, b * f);
            put(buffers::A_SILU, b * f, b * f);
        }
        VariantTag::TwoKernel => {
            put(buffers::X, b * d, 0);
            put(buffers::W_GATE, d * f, 0);
            put(buffers::W_UP, d * f, 0);
            put(buffers::A_GATE_UP, 2 * b * f, 2 * b * f);
        }
        VariantTag::Fused => {
            let tile = tile.ok_or(Error::MissingTile)?;
            tile.validate()?;
            let reuse = predicted_reuse_counts(shape, tile);
            put(buffers::X, reuse.x_reads, 0);
            put(buffers::W_GATE, reuse.weight_reads / 2, 0);
            put(buffers::W_UP, reuse.weight_reads / 2, 0);
        }
    }
    // A_2: written by stage 1, read by stage 2.
    put(buffers::A_2, b * f, b * f);
    put(buffers::W_DOWN, f * d, 0);
    put(buffers::Y, 0, b * d);
    Ok(TrafficReport::from_buffers(m, stage2_elements(shape)))
}

/// Stage-1 FLOPs: two GEMMs plus SiLU and the gate multiply. The same for
/// every variant.
pub fn stage1_flops(shape: &MlpShape) -> u64 {
    let (b, d, f) = (shape.batch as u64, shape.d_model as u64, shape.d_ff as u64);
    2 * (2 * b * d * f) + SILU_FLOPS * b * f
}

/// Stage-1 FLOPs per byte of predicted stage-1 traffic.
pub fn arithmetic_intensity(variant: VariantTag, shape: &MlpShape, tile: Option<&TileConfig>) -> Result<f64> {
    arithmetic_intensity_with(variant, shape, tile, DEFAULT_BYTES_PER_ELEMENT)
}

pub fn arithmetic_intensity_with(variant: VariantTag, shape: &MlpShape, tile: Option<&TileConfig>, bytes_per_element: u64) -> Result<f64> {
    let report = predict_traffic(variant, shape, tile)?.with_bytes_per_element(bytes_per_element);
    Ok(stage1_flops(shape) as f64 / report.stage1_bytes() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferMismatch {
    pub buffer: String,
    pub predicted: Option<AccessCount>,
    pub observed: Option<AccessCount>,
}

/// Per-buffer disagreements between prediction and an instrumented run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficDiff {
    pub mismatches: Vec<BufferMismatch>,
}

impl TrafficDiff {
    pub fn is_empty(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn compare(predicted: &BTreeMap<String, AccessCount>, observed: &BTreeMap<String, AccessCount>) -> Self {
        let mut names: Vec<&String> = predicted.keys().chain(observed.keys()).collect();
        names.sort();
        names.dedup();
        let mismatches = names
            .into_iter()
            .filter_map(|name| {
                let (p, o) = (predicted.get(name).copied(), observed.get(name).copied());
                (p != o).then(|| BufferMismatch { buffer: name.clone(), predicted: p, observed: o })
            })
            .collect();
        Self { mismatches }
    }
}

impl fmt::Display for TrafficDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("no mismatches");
        }
        let show = |c: Option<AccessCount>| match c {
            Some(c) => format!("{}r/{}w", c.reads, c.writes),
            None => "absent".to_owned(),
        };
        for (i, m) in self.mismatches.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: predicted {}, observed {}", m.buffer, show(m.predicted), show(m.observed))?;
        }
        Ok(())
    }
}

/// Runs the executor for `variant` with instrumentation on seeded random
/// data and diffs the ledger against [`predict_traffic`].
pub fn verify_against_instrumented(variant: VariantTag, shape: &MlpShape, tile: Option<&TileConfig>, seed: u64) -> Result<TrafficDiff> {
    verify_against_instrumented_with(variant, shape, tile, seed, None)
}

#[doc(hidden)]
pub fn verify_against_instrumented_with(
    variant: VariantTag,
    shape: &MlpShape,
    tile: Option<&TileConfig>,
    seed: u64,
    mutant: Option<FusedMutant>,
) -> Result<TrafficDiff> {
    let predicted = predict_traffic(variant, shape, tile)?;
    let config = match variant {
        VariantTag::FourKernel => KernelConfig::four_kernel(),
        VariantTag::TwoKernel => KernelConfig::two_kernel(),
        VariantTag::Fused => KernelConfig::fused(*tile.ok_or(Error::MissingTile)?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ledger = AccessLedger::new();
    let mut w = MlpWeights::random(shape.d_model, shape.d_ff, 1.0, &mut rng)?;
    w.instrument(&ledger);
    let x = Matrix::random(shape.batch, shape.d_model, 1.0, &mut rng)?.instrumented(&ledger, buffers::X);
    executor::run_block_with(&config, &x, &w, mutant)?;
    Ok(TrafficDiff::compare(&predicted.per_buffer, &ledger.snapshot()))
}
