//! Single-pass tiled stage 1: `A_2 = (X W_up) ⊗ SiLU(X W_gate)` without
//! materializing `A_gate`, `A_1` or `A_silu`.
//!
//! For each output tile both accumulators are reduced over the full
//! `d_model` axis in tile-local scratch; SiLU and the gate multiply run only
//! after that reduction, and the finished `A_2` tile is stored once.
//!
//! The loop order decides which operand panel stays resident:
//!
//! * [`LoopOrder::RowMajorTiling`] walks row blocks outermost and keeps the
//!   `X` row panel resident, so `X` is read once and each weight element is
//!   re-read once per row block.
//! * [`LoopOrder::ColumnMajorTiling`] walks `d_ff` column blocks outermost
//!   and keeps the weight column panels resident, so weights are read once
//!   and `X` is re-read once per column block.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::swiglu::{buffers, down_projection, MlpWeights, VariantTag};
use crate::tensor::{shape_error, silu, Matrix, MlpShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum LoopOrder {
    /// Batch-row blocks outermost.
    RowMajorTiling,
    /// `d_ff` column blocks outermost.
    ColumnMajorTiling,
}

impl LoopOrder {
    fn tag(self) -> &'static str {
        match self {
            LoopOrder::RowMajorTiling => "row",
            LoopOrder::ColumnMajorTiling => "col",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct TileConfig {
    /// Rows of `X` per tile.
    pub tile_m: usize,
    /// `d_ff` columns per tile.
    pub tile_n: usize,
    /// Reduction chunk along `d_model`.
    pub tile_k: usize,
    pub loop_order: LoopOrder,
}

impl TileConfig {
    pub fn new(tile_m: usize, tile_n: usize, tile_k: usize, loop_order: LoopOrder) -> Result<Self> {
        let t = Self { tile_m, tile_n, tile_k, loop_order };
        t.validate()?;
        Ok(t)
    }

    /// One tile covering the whole problem.
    pub fn single_tile(shape: &MlpShape) -> Self {
        Self { tile_m: shape.batch, tile_n: shape.d_ff, tile_k: shape.d_model, loop_order: LoopOrder::RowMajorTiling }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_m == 0 {
            return Err(Error::ZeroTile("tile_m"));
        }
        if self.tile_n == 0 {
            return Err(Error::ZeroTile("tile_n"));
        }
        if self.tile_k == 0 {
            return Err(Error::ZeroTile("tile_k"));
        }
        Ok(())
    }

    /// Tile dims clamped to the problem; the executed schedule is unchanged.
    pub fn clamped(&self, shape: &MlpShape) -> Self {
        Self {
            tile_m: self.tile_m.min(shape.batch),
            tile_n: self.tile_n.min(shape.d_ff),
            tile_k: self.tile_k.min(shape.d_model),
            loop_order: self.loop_order,
        }
    }

    pub fn label(&self) -> String {
        format!("fused_{}_m{}_n{}_k{}", self.loop_order.tag(), self.tile_m, self.tile_n, self.tile_k)
    }
}

impl fmt::Display for TileConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(&self.label())
    }
}

/// One candidate in the scheduler's search space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    pub variant: VariantTag,
    /// Meaningful only for [`VariantTag::Fused`].
    pub tile: Option<TileConfig>,
    pub label: String,
}

impl KernelConfig {
    pub fn four_kernel() -> Self {
        Self { variant: VariantTag::FourKernel, tile: None, label: VariantTag::FourKernel.as_str().to_owned() }
    }

    pub fn two_kernel() -> Self {
        Self { variant: VariantTag::TwoKernel, tile: None, label: VariantTag::TwoKernel.as_str().to_owned() }
    }

    pub fn fused(tile: TileConfig) -> Self {
        Self { variant: VariantTag::Fused, tile: Some(tile), label: tile.label() }
    }

    /// Parses a label produced by this module: `four_kernel`, `two_kernel`,
    /// or `fused_{row|col}_m<M>_n<N>_k<K>`.
    pub fn from_label(label: &str) -> Result<Self> {
        let unknown = || Error::UnknownExecutor(label.to_owned());
        match label {
            "four_kernel" => return Ok(Self::four_kernel()),
            "two_kernel" => return Ok(Self::two_kernel()),
            _ => {}
        }
        let rest = label.strip_prefix("fused_").ok_or_else(unknown)?;
        let parts: Vec<&str> = rest.split('_').collect();
        let [order, m, n, k] = parts.as_slice() else {
            return Err(unknown());
        };
        let loop_order = match *order {
            "row" => LoopOrder::RowMajorTiling,
            "col" => LoopOrder::ColumnMajorTiling,
            _ => return Err(unknown()),
        };
        let dim = |s: &str, prefix: char| -> Result<usize> { s.strip_prefix(prefix).and_then(|d| d.parse().ok()).ok_or_else(unknown) };
        let tile = TileConfig::new(dim(m, 'm')?, dim(n, 'n')?, dim(k, 'k')?, loop_order)?;
        Ok(Self::fused(tile))
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant, &self.tile) {
            (VariantTag::Fused, None) => Err(Error::MissingTile),
            (VariantTag::Fused, Some(t)) => t.validate(),
            _ => Ok(()),
        }
    }
}

impl FromStr for KernelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_label(s.trim())
    }
}

/// Deliberately broken kernels used as negative controls by the
/// verification suite.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusedMutant {
    /// Applies SiLU to every k-chunk's partial gate sum instead of the
    /// completed reduction.
    SiluPerChunk,
    /// Spills the gate accumulators to a global `A_gate` buffer and reads
    /// them back before the epilogue.
    SpillGate,
}

/// Global read/write multiplicities the tiling schedule implies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReuseCounts {
    pub x_reads: u64,
    /// `W_up` and `W_gate` reads combined.
    pub weight_reads: u64,
    pub a2_writes: u64,
}

pub fn predicted_reuse_counts(shape: &MlpShape, tile: &TileConfig) -> ReuseCounts {
    let (b, d, f) = (shape.batch as u64, shape.d_model as u64, shape.d_ff as u64);
    let (tm, tn) = (tile.tile_m as u64, tile.tile_n as u64);
    match tile.loop_order {
        LoopOrder::ColumnMajorTiling => ReuseCounts { x_reads: b * d * f.div_ceil(tn), weight_reads: 2 * d * f, a2_writes: b * f },
        LoopOrder::RowMajorTiling => ReuseCounts { x_reads: b * d, weight_reads: 2 * d * f * b.div_ceil(tm), a2_writes: b * f },
    }
}

fn blocks(extent: usize, tile: usize) -> impl Iterator<Item = (usize, usize)> + Clone {
    (0..extent.div_ceil(tile)).map(move |b| (b * tile, ((b + 1) * tile).min(extent)))
}

/// Operand panel source for one output tile: either rows already resident
/// from the outer loop, or fresh global loads per k-chunk.
#[derive(Clone, Copy)]
enum Operand<'a> {
    Resident(&'a [&'a [f64]]),
    Global(&'a Matrix),
}

struct TileOutput {
    i0: usize,
    j0: usize,
    width: usize,
    /// Row-major `rows x width`.
    values: Vec<f64>,
}

struct Problem<'a> {
    x: &'a Matrix,
    w_up: &'a Matrix,
    w_gate: &'a Matrix,
    tile: TileConfig,
    mutant: Option<FusedMutant>,
    /// Target of the `SpillGate` mutant.
    spill: Option<&'a std::sync::Mutex<Matrix>>,
}

impl Problem<'_> {
    /// Computes one output tile. `x_src` rows are indexed relative to `i0`
    /// when resident; weight rows relative to 0 (the full `d_model` axis).
    fn tile(
        &self,
        (i0, i1): (usize, usize),
        (j0, j1): (usize, usize),
        x_src: Operand<'_>,
        w_src: (Operand<'_>, Operand<'_>),
    ) -> TileOutput {
        let d = self.x.cols();
        let (rows, width) = (i1 - i0, j1 - j0);
        let mut acc_g = vec![0.0; rows * width];
        let mut acc_u = vec![0.0; rows * width];
        let per_chunk = self.mutant == Some(FusedMutant::SiluPerChunk);
        let mut silu_sum = if per_chunk { vec![0.0; rows * width] } else { Vec::new() };

        let mut x_rows: Vec<&[f64]> = Vec::with_capacity(rows);
        let mut g_rows: Vec<&[f64]> = Vec::with_capacity(self.tile.tile_k);
        let mut u_rows: Vec<&[f64]> = Vec::with_capacity(self.tile.tile_k);

        for (k0, k1) in blocks(d, self.tile.tile_k) {
            x_rows.clear();
            match x_src {
                Operand::Resident(panel) => x_rows.extend(panel.iter().map(|r| &r[k0..k1])),
                Operand::Global(x) => x_rows.extend((i0..i1).map(|i| x.load_row_span(i, k0, k1))),
            }
            g_rows.clear();
            u_rows.clear();
            match (&w_src.0, &w_src.1) {
                (Operand::Resident(g), Operand::Resident(u)) => {
                    g_rows.extend_from_slice(&g[k0..k1]);
                    u_rows.extend_from_slice(&u[k0..k1]);
                }
                (Operand::Global(g), Operand::Global(u)) => {
                    g_rows.extend((k0..k1).map(|p| g.load_row_span(p, j0, j1)));
                    u_rows.extend((k0..k1).map(|p| u.load_row_span(p, j0, j1)));
                }
                _ => unreachable!("weight panels share a source"),
            }

            if per_chunk {
                acc_g.fill(0.0);
            }
            for (pk, (g, u)) in g_rows.iter().zip(&u_rows).enumerate() {
                let (g, u) = (&g[..width], &u[..width]);
                for (r, xr) in x_rows.iter().enumerate() {
                    let xv = xr[pk];
                    let ag = &mut acc_g[r * width..(r + 1) * width];
                    let au = &mut acc_u[r * width..(r + 1) * width];
                    for j in 0..width {
                        ag[j] += xv * g[j];
                        au[j] += xv * u[j];
                    }
                }
            }
            if per_chunk {
                for (s, g) in silu_sum.iter_mut().zip(&acc_g) {
                    *s += silu(*g);
                }
            }
        }

        let values = if per_chunk {
            acc_u.iter().zip(&silu_sum).map(|(u, s)| u * s).collect()
        } else {
            if let Some(spill) = self.spill {
                let mut a_gate = spill.lock().expect("spill lock poisoned");
                for r in 0..rows {
                    a_gate.store_row_span(i0 + r, j0, &acc_g[r * width..(r + 1) * width]);
                }
                for r in 0..rows {
                    let back = a_gate.load_row_span(i0 + r, j0, j1);
                    acc_g[r * width..(r + 1) * width].copy_from_slice(back);
                }
            }
            acc_u.iter().zip(&acc_g).map(|(u, g)| u * silu(*g)).collect()
        };
        TileOutput { i0, j0, width, values }
    }

    /// Runs one outer-loop unit: a row block (row-major) or a column block
    /// (column-major), loading its resident panel once.
    fn unit(&self, outer: (usize, usize)) -> Vec<TileOutput> {
        let (b, d, f) = (self.x.rows(), self.x.cols(), self.w_up.cols());
        match self.tile.loop_order {
            LoopOrder::RowMajorTiling => {
                let (i0, i1) = outer;
                let panel: Vec<&[f64]> = (i0..i1).map(|i| self.x.load_row_span(i, 0, d)).collect();
                blocks(f, self.tile.tile_n)
                    .map(|cols| {
                        self.tile(outer, cols, Operand::Resident(&panel), (Operand::Global(self.w_gate), Operand::Global(self.w_up)))
                    })
                    .collect()
            }
            LoopOrder::ColumnMajorTiling => {
                let (j0, j1) = outer;
                let g: Vec<&[f64]> = (0..d).map(|p| self.w_gate.load_row_span(p, j0, j1)).collect();
                let u: Vec<&[f64]> = (0..d).map(|p| self.w_up.load_row_span(p, j0, j1)).collect();
                blocks(b, self.tile.tile_m)
                    .map(|rows| self.tile(rows, outer, Operand::Global(self.x), (Operand::Resident(&g), Operand::Resident(&u))))
                    .collect()
            }
        }
    }
}

fn check_stage1(x: &Matrix, w_up: &Matrix, w_gate: &Matrix, a2: &Matrix) -> Result<()> {
    if w_up.rows() != x.cols() {
        return Err(shape_error("fused stage 1", x, "X", w_up, "W_Up"));
    }
    if w_gate.dims() != w_up.dims() {
        return Err(shape_error("fused stage 1", w_gate, "W_Gate", w_up, "W_Up"));
    }
    if a2.dims() != (x.rows(), w_up.cols()) {
        return Err(Error::ShapeMismatch {
            op: "fused stage 1",
            lhs: a2.name().unwrap_or("A_2").to_owned(),
            lhs_dims: a2.dims(),
            rhs: "X W_Up".into(),
            rhs_dims: (x.rows(), w_up.cols()),
        });
    }
    Ok(())
}

#[doc(hidden)]
#[allow(clippy::too_many_arguments)]
pub fn run_fused_stage1_impl(
    x: &Matrix,
    w_up: &Matrix,
    w_gate: &Matrix,
    tile: &TileConfig,
    a2: &mut Matrix,
    workers: usize,
    mutant: Option<FusedMutant>,
) -> Result<()> {
    tile.validate()?;
    check_stage1(x, w_up, w_gate, a2)?;
    let spill = match mutant {
        Some(FusedMutant::SpillGate) => Some(std::sync::Mutex::new(a2.zeros_on_ledger_of(x.rows(), w_up.cols(), buffers::A_GATE)?)),
        _ => None,
    };
    let problem = Problem { x, w_up, w_gate, tile: *tile, mutant, spill: spill.as_ref() };
    let outer: Vec<(usize, usize)> = match tile.loop_order {
        LoopOrder::RowMajorTiling => blocks(x.rows(), tile.tile_m).collect(),
        LoopOrder::ColumnMajorTiling => blocks(w_up.cols(), tile.tile_n).collect(),
    };

    let workers = workers.clamp(1, outer.len());
    let tiles: Vec<TileOutput> = if workers == 1 {
        outer.iter().flat_map(|&o| problem.unit(o)).collect()
    } else {
        let problem = &problem;
        let outer = &outer;
        let mut per_worker: Vec<Vec<TileOutput>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| s.spawn(move || outer.iter().skip(w).step_by(workers).flat_map(|&o| problem.unit(o)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("tile worker panicked")).collect()
        });
        per_worker.iter_mut().flat_map(std::mem::take).collect()
    };

    for t in &tiles {
        for (r, row) in t.values.chunks_exact(t.width).enumerate() {
            a2.store_row_span(t.i0 + r, t.j0, row);
        }
    }
    Ok(())
}

/// Fused stage 1 into a preallocated `a2`.
pub fn run_fused_stage1(x: &Matrix, w_up: &Matrix, w_gate: &Matrix, tile: &TileConfig, a2: &mut Matrix) -> Result<()> {
    run_fused_stage1_impl(x, w_up, w_gate, tile, a2, 1, None)
}

/// As [`run_fused_stage1`], distributing outer-loop blocks over `workers`
/// threads. Output values and ledger totals do not depend on `workers`.
pub fn run_fused_stage1_parallel(
    x: &Matrix,
    w_up: &Matrix,
    w_gate: &Matrix,
    tile: &TileConfig,
    a2: &mut Matrix,
    workers: usize,
) -> Result<()> {
    run_fused_stage1_impl(x, w_up, w_gate, tile, a2, workers, None)
}

/// Allocates `A_2` (on `x`'s ledger, if any) and runs fused stage 1.
pub fn fused_stage1(x: &Matrix, w: &MlpWeights, tile: &TileConfig) -> Result<Matrix> {
    w.check_input(x)?;
    let mut a2 = x.zeros_on_ledger_of(x.rows(), w.d_ff(), buffers::A_2)?;
    run_fused_stage1(x, &w.w_up, &w.w_gate, tile, &mut a2)?;
    Ok(a2)
}

/// Fused stage 1 followed by the shared down projection.
pub fn run_fused(x: &Matrix, w: &MlpWeights, tile: &TileConfig) -> Result<Matrix> {
    let a2 = fused_stage1(x, w, tile)?;
    down_projection(&a2, &w.w_down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swiglu::{run_four_kernel, two_kernel_stage1, Accounting};
    use crate::tensor::AccessLedger;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(b: usize, d: usize, f: usize, seed: u64) -> (Matrix, MlpWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = MlpWeights::random(d, f, 1.0, &mut rng).unwrap();
        let x = Matrix::random(b, d, 1.0, &mut rng).unwrap();
        (x, w)
    }

    fn tile(m: usize, n: usize, k: usize, o: LoopOrder) -> TileConfig {
        TileConfig::new(m, n, k, o).unwrap()
    }

    /// Stage-1 oracle straight from the definition, one element at a time.
    fn oracle_stage1(x: &Matrix, w: &MlpWeights) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..x.rows() {
            for j in 0..w.d_ff() {
                let (mut g, mut u) = (0.0, 0.0);
                for p in 0..x.cols() {
                    g += x.at(i, p) * w.w_gate.at(p, j);
                    u += x.at(i, p) * w.w_up.at(p, j);
                }
                out.push(u * (g / (1.0 + (-g).exp())));
            }
        }
        out
    }

    #[test]
    fn single_tile_equals_two_kernel_stage1() {
        let (x, w) = instance(3, 5, 7, 11);
        let shape = w.shape(3).unwrap();
        let fused = fused_stage1(&x, &w, &TileConfig::single_tile(&shape)).unwrap();
        let two = two_kernel_stage1(&x, &w, Accounting::Ideal).unwrap();
        assert_eq!(fused, two);
        let big = tile(100, 100, 100, LoopOrder::ColumnMajorTiling);
        assert_eq!(fused_stage1(&x, &w, &big).unwrap(), two);
    }

    #[test]
    fn zero_input_for_every_tiling() {
        let (_, w) = instance(2, 4, 8, 12);
        let x = Matrix::zeros(2, 4).unwrap();
        for o in [LoopOrder::RowMajorTiling, LoopOrder::ColumnMajorTiling] {
            for t in [tile(1, 1, 1, o), tile(1, 3, 2, o), tile(2, 8, 4, o)] {
                assert!(fused_stage1(&x, &w, &t).unwrap().values().iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn k_split_matches_oracle() {
        let (x, w) = instance(2, 4, 8, 13);
        let oracle = oracle_stage1(&x, &w);
        let a = fused_stage1(&x, &w, &tile(1, 2, 2, LoopOrder::RowMajorTiling)).unwrap();
        let b = fused_stage1(&x, &w, &tile(2, 8, 4, LoopOrder::RowMajorTiling)).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
        for (v, o) in a.values().iter().zip(&oracle) {
            assert!((v - o).abs() <= 1e-12);
        }
    }

    #[test]
    fn run_fused_scalar_and_zero_gate() {
        let w = MlpWeights::new(
            Matrix::from_rows(&[[3.0]]).unwrap(),
            Matrix::from_rows(&[[1.0]]).unwrap(),
            Matrix::from_rows(&[[1.0]]).unwrap(),
        )
        .unwrap();
        let x = Matrix::from_rows(&[[2.0]]).unwrap();
        let y = run_fused(&x, &w, &tile(1, 1, 1, LoopOrder::RowMajorTiling)).unwrap();
        assert_eq!(y, run_four_kernel(&x, &w).unwrap());
        assert!((y.at(0, 0) - 10.5696).abs() < 1e-4);

        let w = MlpWeights::new(Matrix::filled(2, 2, 1.0).unwrap(), Matrix::zeros(2, 2).unwrap(), Matrix::identity(2).unwrap()).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let y = run_fused(&x, &w, &tile(1, 1, 1, LoopOrder::ColumnMajorTiling)).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_zero_tile_and_bad_shapes() {
        let (x, w) = instance(2, 4, 8, 14);
        let bad = TileConfig { tile_m: 1, tile_n: 0, tile_k: 1, loop_order: LoopOrder::RowMajorTiling };
        assert!(matches!(fused_stage1(&x, &w, &bad), Err(Error::ZeroTile("tile_n"))));
        assert!(TileConfig::new(0, 1, 1, LoopOrder::RowMajorTiling).is_err());
        let x5 = Matrix::zeros(2, 5).unwrap();
        assert!(fused_stage1(&x5, &w, &tile(1, 1, 1, LoopOrder::RowMajorTiling)).is_err());
        let mut wrong = Matrix::zeros(2, 7).unwrap();
        assert!(run_fused_stage1(&x, &w.w_up, &w.w_gate, &tile(1, 1, 1, LoopOrder::RowMajorTiling), &mut wrong).is_err());
    }

    #[test]
    fn predicted_reuse_examples() {
        let shape = MlpShape::new(2, 4, 8).unwrap();
        let single = predicted_reuse_counts(&shape, &TileConfig::single_tile(&shape));
        assert_eq!(single, ReuseCounts { x_reads: 8, weight_reads: 64, a2_writes: 16 });
        let col = predicted_reuse_counts(&shape, &tile(2, 2, 4, LoopOrder::ColumnMajorTiling));
        assert_eq!(col.x_reads, 32);
        let shape4 = MlpShape::new(4, 4, 8).unwrap();
        let row = predicted_reuse_counts(&shape4, &tile(1, 8, 4, LoopOrder::RowMajorTiling));
        assert_eq!(row.weight_reads, 2 * 4 * 8 * 4);
    }

    /// Replays the tile loops and counts each load, independently of the
    /// executor's code path.
    fn enumerate_loads(shape: &MlpShape, t: &TileConfig) -> (u64, u64) {
        let (b, d, f) = (shape.batch, shape.d_model, shape.d_ff);
        let (mut xr, mut wr) = (0u64, 0u64);
        let row_blocks = b.div_ceil(t.tile_m);
        let col_blocks = f.div_ceil(t.tile_n);
        match t.loop_order {
            LoopOrder::RowMajorTiling => {
                for ib in 0..row_blocks {
                    let rows = ((ib + 1) * t.tile_m).min(b) - ib * t.tile_m;
                    xr += (rows * d) as u64;
                    for jb in 0..col_blocks {
                        let cols = ((jb + 1) * t.tile_n).min(f) - jb * t.tile_n;
                        wr += (2 * d * cols) as u64;
                    }
                }
            }
            LoopOrder::ColumnMajorTiling => {
                for jb in 0..col_blocks {
                    let cols = ((jb + 1) * t.tile_n).min(f) - jb * t.tile_n;
                    wr += (2 * d * cols) as u64;
                    for ib in 0..row_blocks {
                        let rows = ((ib + 1) * t.tile_m).min(b) - ib * t.tile_m;
                        xr += (rows * d) as u64;
                    }
                }
            }
        }
        (xr, wr)
    }

    #[test]
    fn reuse_formula_matches_loop_enumeration() {
        for (b, d, f) in [(1, 1, 1), (2, 4, 8), (3, 5, 7), (5, 3, 13)] {
            let shape = MlpShape::new(b, d, f).unwrap();
            for o in [LoopOrder::RowMajorTiling, LoopOrder::ColumnMajorTiling] {
                for (m, n, k) in [(1, 1, 1), (2, 3, 2), (4, 5, 3), (9, 9, 9)] {
                    let t = tile(m, n, k, o);
                    let p = predicted_reuse_counts(&shape, &t);
                    assert_eq!((p.x_reads, p.weight_reads), enumerate_loads(&shape, &t), "{shape} {t}");
                }
            }
        }
    }

    #[test]
    fn instrumented_counts_match_prediction_on_edge_tiles() {
        let (x, mut w) = instance(3, 5, 7, 15);
        let shape = w.shape(3).unwrap();
        for o in [LoopOrder::RowMajorTiling, LoopOrder::ColumnMajorTiling] {
            let t = tile(2, 3, 2, o);
            let ledger = AccessLedger::new();
            w.instrument(&ledger);
            let xi = x.clone().instrumented(&ledger, buffers::X);
            fused_stage1(&xi, &w, &t).unwrap();
            let p = predicted_reuse_counts(&shape, &t);
            assert_eq!(ledger.count(buffers::X).unwrap().reads, p.x_reads);
            let wr = ledger.count(buffers::W_UP).unwrap().reads + ledger.count(buffers::W_GATE).unwrap().reads;
            assert_eq!(wr, p.weight_reads);
            assert_eq!(ledger.count(buffers::A_2).unwrap().writes, p.a2_writes);
            assert!(ledger.count(buffers::A_GATE).is_none());
        }
    }

    #[test]
    fn worker_count_does_not_change_values_or_counts() {
        let (x, mut w) = instance(6, 9, 23, 16);
        for o in [LoopOrder::RowMajorTiling, LoopOrder::ColumnMajorTiling] {
            let t = tile(2, 4, 3, o);
            let mut reference: Option<(Matrix, u64)> = None;
            for workers in [1, 2, 3, 8] {
                let ledger = AccessLedger::new();
                w.instrument(&ledger);
                let xi = x.clone().instrumented(&ledger, buffers::X);
                let mut a2 = Matrix::zeros(6, 23).unwrap().instrumented(&ledger, buffers::A_2);
                run_fused_stage1_parallel(&xi, &w.w_up, &w.w_gate, &t, &mut a2, workers).unwrap();
                let total = ledger.total();
                match &reference {
                    None => reference = Some((a2, total)),
                    Some((r, tot)) => {
                        assert!(r.max_abs_diff(&a2) <= 1e-12);
                        assert_eq!(*tot, total);
                    }
                }
            }
        }
    }

    #[test]
    fn silu_per_chunk_mutant_breaks_tiling_invariance() {
        let (x, w) = instance(2, 8, 6, 17);
        let mut good = Matrix::zeros(2, 6).unwrap();
        let mut bad = Matrix::zeros(2, 6).unwrap();
        let t = tile(1, 2, 2, LoopOrder::RowMajorTiling);
        run_fused_stage1(&x, &w.w_up, &w.w_gate, &t, &mut good).unwrap();
        run_fused_stage1_impl(&x, &w.w_up, &w.w_gate, &t, &mut bad, 1, Some(FusedMutant::SiluPerChunk)).unwrap();
        assert!(good.max_abs_diff(&bad) > 1e-6);
    }

    #[test]
    fn spill_mutant_materializes_a_gate() {
        let (x, mut w) = instance(2, 4, 8, 18);
        let ledger = AccessLedger::new();
        w.instrument(&ledger);
        let xi = x.instrumented(&ledger, buffers::X);
        let mut a2 = Matrix::zeros(2, 8).unwrap().instrumented(&ledger, buffers::A_2);
        let t = tile(1, 4, 2, LoopOrder::ColumnMajorTiling);
        run_fused_stage1_impl(&xi, &w.w_up, &w.w_gate, &t, &mut a2, 1, Some(FusedMutant::SpillGate)).unwrap();
        assert_eq!(ledger.count(buffers::A_GATE).unwrap().total(), 2 * 16);
    }

    #[test]
    fn kernel_config_labels_round_trip() {
        for label in ["four_kernel", "two_kernel", "fused_row_m1_n32_k32", "fused_col_m16_n4096_k1024"] {
            let c = KernelConfig::from_label(label).unwrap();
            assert_eq!(c.label, label);
        }
        for bad in ["fused", "fused_diag_m1_n1_k1", "fused_row_m0_n1_k1", "three_kernel", "fused_row_m1_n1"] {
            assert!(KernelConfig::from_label(bad).is_err(), "{bad}");
        }
        let missing = KernelConfig { variant: VariantTag::Fused, tile: None, label: "x".into() };
        assert!(matches!(missing.validate(), Err(Error::MissingTile)));
    }
}
