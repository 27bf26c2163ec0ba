//! Tensor-parallel execution of one SwiGLU block on simulated devices.
//!
//! The compound scheme splits `W_up`/`W_gate` by column and `W_down` by row
//! over the same `d_ff` ranges. Each device then runs stage 1 and its
//! partial down projection locally, and one all-reduce sums the partial
//! outputs. The naive baseline splits every GEMM by output column and
//! all-gathers after each one.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::executor;
use crate::fused::KernelConfig;
use crate::swiglu::{down_projection, MlpWeights};
use crate::tensor::{matmul, silu, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShardScheme {
    /// Column-split up/gate, row-split down, one all-reduce per block.
    CompoundSingleAllReduce,
    /// Column-split every GEMM, one all-gather per GEMM.
    NaivePerGemmAllGather,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub num_devices: usize,
    /// Contiguous, disjoint ranges covering `0..extent` in device order.
    pub ff_ranges: Vec<Range<usize>>,
    pub scheme: ShardScheme,
}

impl ShardPlan {
    /// Balanced contiguous split of `0..extent`; the first `extent % devices`
    /// devices get one extra column.
    pub fn new(extent: usize, devices: usize, scheme: ShardScheme) -> Result<Self> {
        if devices == 0 {
            return Err(Error::Plan("need at least one device".into()));
        }
        if devices > extent {
            return Err(Error::Plan(format!("{devices} devices cannot each own a non-empty slice of {extent} columns")));
        }
        let (base, extra) = (extent / devices, extent % devices);
        let mut start = 0;
        let ff_ranges = (0..devices)
            .map(|p| {
                let len = base + usize::from(p < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Ok(Self { num_devices: devices, ff_ranges, scheme })
    }

    pub fn extent(&self) -> usize {
        self.ff_ranges.last().map_or(0, |r| r.end)
    }

    pub fn max_shard(&self) -> usize {
        self.ff_ranges.iter().map(|r| r.len()).max().unwrap_or(0)
    }

    fn check_covers(&self, extent: usize) -> Result<()> {
        if self.ff_ranges.len() != self.num_devices {
            return Err(Error::Plan(format!("{} ranges for {} devices", self.ff_ranges.len(), self.num_devices)));
        }
        let mut next = 0;
        for r in &self.ff_ranges {
            if r.start != next || r.is_empty() {
                return Err(Error::Plan(format!("range {r:?} breaks the contiguous partition")));
            }
            next = r.end;
        }
        if next != extent {
            return Err(Error::Plan(format!("ranges cover 0..{next}, expected 0..{extent}")));
        }
        Ok(())
    }
}

/// Compound-scheme plan over `d_ff`.
pub fn make_plan(d_ff: usize, devices: usize) -> Result<ShardPlan> {
    ShardPlan::new(d_ff, devices, ShardScheme::CompoundSingleAllReduce)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CollectiveEvent {
    pub kind: CollectiveKind,
    pub payload_elements_per_device: u64,
}

/// Append-only record of the collectives one simulated block issued.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CollectiveLog {
    events: Vec<CollectiveEvent>,
}

impl CollectiveLog {
    pub fn push(&mut self, kind: CollectiveKind, payload_elements_per_device: u64) {
        self.events.push(CollectiveEvent { kind, payload_elements_per_device });
    }

    pub fn events(&self) -> &[CollectiveEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, kind: CollectiveKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommModel {
    /// `payload × bytes` per event, independent of device count.
    Logical,
    /// Per-device bytes sent by ring all-reduce (`2(P-1)/P × payload`) and
    /// ring all-gather (`(P-1)/P × payload`).
    Ring,
}

/// Bytes each device moves for the collectives in `log`.
pub fn comm_volume(log: &CollectiveLog, devices: usize, model: CommModel, bytes_per_element: u64) -> f64 {
    let p = devices.max(1) as f64;
    log.events
        .iter()
        .map(|e| {
            let payload = (e.payload_elements_per_device * bytes_per_element) as f64;
            match (model, e.kind) {
                (CommModel::Logical, _) => payload,
                (CommModel::Ring, CollectiveKind::AllReduce) => 2.0 * (p - 1.0) / p * payload,
                (CommModel::Ring, CollectiveKind::AllGather) => (p - 1.0) / p * payload,
            }
        })
        .sum()
}

/// Everything one compound-scheme run produces.
#[derive(Debug, Clone)]
pub struct TpRun {
    pub output: Matrix,
    pub log: CollectiveLog,
    /// Per-device stage-1 outputs, `B x |range_p|`.
    pub shard_a2: Vec<Matrix>,
    /// Per-device partial outputs before the all-reduce.
    pub partials: Vec<Matrix>,
}

fn shard_weights(w: &MlpWeights, range: &Range<usize>) -> Result<MlpWeights> {
    MlpWeights::new(
        w.w_up.column_block(range.start, range.end)?,
        w.w_gate.column_block(range.start, range.end)?,
        w.w_down.row_block(range.start, range.end)?,
    )
}

/// Sums `parts` element-wise in slice order.
fn all_reduce_sum(parts: &[Matrix]) -> Matrix {
    let mut values = parts[0].values().to_vec();
    for part in &parts[1..] {
        for (a, v) in values.iter_mut().zip(part.values()) {
            *a += v;
        }
    }
    Matrix::from_vec(parts[0].rows(), parts[0].cols(), values).expect("same shape as first partial")
}

pub fn run_tp_mlp_traced(x: &Matrix, w: &MlpWeights, plan: &ShardPlan, executor: &KernelConfig) -> Result<TpRun> {
    if plan.scheme != ShardScheme::CompoundSingleAllReduce {
        return Err(Error::Plan("run_tp_mlp needs a compound-scheme plan".into()));
    }
    plan.check_covers(w.d_ff())?;
    executor.validate()?;
    w.check_input(x)?;

    let device = |range: &Range<usize>| -> Result<(Matrix, Matrix)> {
        let shard = shard_weights(w, range)?;
        let a2 = executor::run_stage1(executor, x, &shard)?;
        let partial = down_projection(&a2, &shard.w_down)?;
        Ok((a2, partial))
    };
    let results: Vec<Result<(Matrix, Matrix)>> = if plan.num_devices == 1 {
        vec![device(&plan.ff_ranges[0])]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = plan.ff_ranges.iter().map(|r| s.spawn(|| device(r))).collect();
            handles.into_iter().map(|h| h.join().expect("device panicked")).collect()
        })
    };
    let (shard_a2, partials): (Vec<Matrix>, Vec<Matrix>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();

    let mut log = CollectiveLog::default();
    log.push(CollectiveKind::AllReduce, (x.rows() * w.d_model()) as u64);
    let output = all_reduce_sum(&partials);
    Ok(TpRun { output, log, shard_a2, partials })
}

/// Compound tensor-parallel block: one all-reduce of `B x d_model` per block.
pub fn run_tp_mlp(x: &Matrix, w: &MlpWeights, plan: &ShardPlan, executor: &KernelConfig) -> Result<(Matrix, CollectiveLog)> {
    let run = run_tp_mlp_traced(x, w, plan, executor)?;
    Ok((run.output, run.log))
}

/// Column-split single GEMM followed by an all-gather of the slices.
///
/// The gather payload is the largest device slice, since a collective moves
/// equal-sized buffers from every device.
pub fn run_naive_tp_gemm(x: &Matrix, weight: &Matrix, plan: &ShardPlan) -> Result<(Matrix, CollectiveLog)> {
    plan.check_covers(weight.cols())?;
    if x.cols() != weight.rows() {
        return Err(crate::tensor::shape_error("naive TP GEMM", x, "X", weight, "W"));
    }
    let slices = plan
        .ff_ranges
        .iter()
        .map(|r| {
            let w_p = weight.column_block(r.start, r.end)?;
            let mut out = Matrix::zeros(x.rows(), r.len())?;
            matmul(x, &w_p, &mut out)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut log = CollectiveLog::default();
    log.push(CollectiveKind::AllGather, (x.rows() * plan.max_shard()) as u64);
    Ok((Matrix::hconcat(&slices)?, log))
}

/// Full block with per-GEMM column splits: gate and up are gathered before
/// the pointwise gate, then the down GEMM is split and gathered again.
pub fn run_naive_tp_mlp(x: &Matrix, w: &MlpWeights, devices: usize) -> Result<(Matrix, CollectiveLog)> {
    let ff_plan = ShardPlan::new(w.d_ff(), devices, ShardScheme::NaivePerGemmAllGather)?;
    let model_plan = ShardPlan::new(w.d_model(), devices, ShardScheme::NaivePerGemmAllGather)?;
    let mut log = CollectiveLog::default();
    let (gate, l1) = run_naive_tp_gemm(x, &w.w_gate, &ff_plan)?;
    let (up, l2) = run_naive_tp_gemm(x, &w.w_up, &ff_plan)?;
    let a2_values: Vec<f64> = up.values().iter().zip(gate.values()).map(|(&u, &g)| u * silu(g)).collect();
    let a2 = Matrix::from_vec(x.rows(), w.d_ff(), a2_values)?;
    let (y, l3) = run_naive_tp_gemm(&a2, &w.w_down, &model_plan)?;
    for l in [l1, l2, l3] {
        for e in l.events() {
            log.push(e.kind, e.payload_elements_per_device);
        }
    }
    Ok((y, log))
}
