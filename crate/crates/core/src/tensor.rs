//! Dense row-major matrices with optional global-access instrumentation.
//!
//! A [`Matrix`] stands in for one global (off-chip) buffer. When it is
//! attached to an [`AccessLedger`], every element moved through the counted
//! accessors (`get`, `set`, `load_*`, `store_*`) bumps that buffer's read or
//! write count by one. Kernels keep their tile-local scratch in plain `Vec`s
//! and slices, which are never counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};

/// Read/write totals for one named buffer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct AccessCount {
    pub reads: u64,
    pub writes: u64,
}

impl AccessCount {
    pub fn new(reads: u64, writes: u64) -> Self {
        Self { reads, writes }
    }

    pub fn total(&self) -> u64 {
        self.reads + self.writes
    }
}

#[derive(Debug, Default)]
struct BufferCounters {
    reads: AtomicU64,
    writes: AtomicU64,
}

/// Per-buffer element transfer counters, shared by every matrix of one run.
///
/// Counters are atomics, so tile workers on different threads can bump the
/// same buffer concurrently and the merged totals stay exact.
#[derive(Debug, Default)]
pub struct AccessLedger {
    buffers: Mutex<BTreeMap<String, Arc<BufferCounters>>>,
}

impl AccessLedger {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn counters(&self, name: &str) -> Arc<BufferCounters> {
        let mut buffers = self.buffers.lock().expect("ledger lock poisoned");
        buffers.entry(name.to_owned()).or_default().clone()
    }

    pub fn count(&self, name: &str) -> Option<AccessCount> {
        let buffers = self.buffers.lock().expect("ledger lock poisoned");
        buffers.get(name).map(|c| AccessCount { reads: c.reads.load(Ordering::Relaxed), writes: c.writes.load(Ordering::Relaxed) })
    }

    pub fn snapshot(&self) -> BTreeMap<String, AccessCount> {
        let buffers = self.buffers.lock().expect("ledger lock poisoned");
        buffers
            .iter()
            .map(|(name, c)| {
                (name.clone(), AccessCount { reads: c.reads.load(Ordering::Relaxed), writes: c.writes.load(Ordering::Relaxed) })
            })
            .collect()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.buffers.lock().expect("ledger lock poisoned").keys().cloned().collect()
    }

    /// Sum of reads and writes over every buffer.
    pub fn total(&self) -> u64 {
        self.snapshot().values().map(AccessCount::total).sum()
    }

    /// Zeroes all counts. Registered buffer names are kept.
    pub fn reset(&self) {
        let buffers = self.buffers.lock().expect("ledger lock poisoned");
        for c in buffers.values() {
            c.reads.store(0, Ordering::Relaxed);
            c.writes.store(0, Ordering::Relaxed);
        }
    }
}

#[derive(Debug)]
struct Probe {
    name: String,
    ledger: Arc<AccessLedger>,
    counters: Arc<BufferCounters>,
}

impl Probe {
    #[inline]
    fn read(&self, n: usize) {
        self.counters.reads.fetch_add(n as u64, Ordering::Relaxed);
    }

    #[inline]
    fn write(&self, n: usize) {
        self.counters.writes.fetch_add(n as u64, Ordering::Relaxed);
    }
}

/// Dense `rows x cols` matrix of `f64` in row-major order.
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    probe: Option<Probe>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimension(format!("matrix must be at least 1x1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidDimension(format!("{} values do not fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data, probe: None })
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::InvalidDimension("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::from_vec(rows, cols, vec![value; rows * cols])
    }

    /// Entries drawn uniformly from `[-scale, scale)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Attaches this buffer to `ledger` under `name`. Counts accumulate on
    /// top of whatever the ledger already holds for that name.
    pub fn instrument(&mut self, ledger: &Arc<AccessLedger>, name: &str) {
        self.probe = Some(Probe { name: name.to_owned(), ledger: Arc::clone(ledger), counters: ledger.counters(name) });
    }

    pub fn instrumented(mut self, ledger: &Arc<AccessLedger>, name: &str) -> Self {
        self.instrument(ledger, name);
        self
    }

    pub fn is_instrumented(&self) -> bool {
        self.probe.is_some()
    }

    pub fn ledger(&self) -> Option<&Arc<AccessLedger>> {
        self.probe.as_ref().map(|p| &p.ledger)
    }

    /// Buffer name when instrumented.
    pub fn name(&self) -> Option<&str> {
        self.probe.as_ref().map(|p| p.name.as_str())
    }

    /// A zero matrix on the same ledger as `self` (if any) under `name`.
    pub fn zeros_on_ledger_of(&self, rows: usize, cols: usize, name: &str) -> Result<Self> {
        let mut m = Self::zeros(rows, cols)?;
        if let Some(ledger) = self.ledger() {
            m.instrument(ledger, name);
        }
        Ok(m)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        if let Some(p) = &self.probe {
            p.read(1);
        }
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        if let Some(p) = &self.probe {
            p.write(1);
        }
        self.data[r * self.cols + c] = value;
    }

    /// Counted read of `row[c0..c1]`.
    #[inline]
    pub fn load_row_span(&self, r: usize, c0: usize, c1: usize) -> &[f64] {
        if let Some(p) = &self.probe {
            p.read(c1 - c0);
        }
        &self.data[r * self.cols + c0..r * self.cols + c1]
    }

    /// Counted read of whole rows `r0..r1`.
    #[inline]
    pub fn load_rows(&self, r0: usize, r1: usize) -> &[f64] {
        if let Some(p) = &self.probe {
            p.read((r1 - r0) * self.cols);
        }
        &self.data[r0 * self.cols..r1 * self.cols]
    }

    /// Counted read of the whole buffer.
    pub fn load_all(&self) -> &[f64] {
        self.load_rows(0, self.rows)
    }

    /// Counted write of `values` into `row[c0..c0 + values.len()]`.
    #[inline]
    pub fn store_row_span(&mut self, r: usize, c0: usize, values: &[f64]) {
        if let Some(p) = &self.probe {
            p.write(values.len());
        }
        let start = r * self.cols + c0;
        self.data[start..start + values.len()].copy_from_slice(values);
    }

    /// Counted write of the whole buffer.
    pub fn store_all(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.data.len(), "store_all length mismatch");
        if let Some(p) = &self.probe {
            p.write(values.len());
        }
        self.data.copy_from_slice(values);
    }

    /// Uncounted view of the storage, for inspection and test oracles.
    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Uncounted element access, for inspection and test oracles.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    /// Uncounted copy of columns `c0..c1`.
    pub fn column_block(&self, c0: usize, c1: usize) -> Result<Self> {
        if c0 >= c1 || c1 > self.cols {
            return Err(Error::InvalidDimension(format!("column range {c0}..{c1} outside 0..{}", self.cols)));
        }
        let width = c1 - c0;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c1]);
        }
        Self::from_vec(self.rows, width, data)
    }

    /// Uncounted copy of rows `r0..r1`.
    pub fn row_block(&self, r0: usize, r1: usize) -> Result<Self> {
        if r0 >= r1 || r1 > self.rows {
            return Err(Error::InvalidDimension(format!("row range {r0}..{r1} outside 0..{}", self.rows)));
        }
        Self::from_vec(r1 - r0, self.cols, self.data[r0 * self.cols..r1 * self.cols].to_vec())
    }

    /// Concatenates matrices with equal row counts side by side (uncounted).
    pub fn hconcat(parts: &[Matrix]) -> Result<Self> {
        let rows = parts.first().map_or(0, Matrix::rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::InvalidDimension("hconcat row counts differ".into()));
        }
        let cols: usize = parts.iter().map(Matrix::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// Largest absolute element-wise difference. Panics on a shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn label(&self, fallback: &str) -> String {
        self.name().unwrap_or(fallback).to_owned()
    }

    pub(crate) fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_error(op, self, "lhs", other, "rhs"));
        }
        Ok(())
    }
}

pub(crate) fn shape_error(op: &'static str, a: &Matrix, a_fallback: &str, b: &Matrix, b_fallback: &str) -> Error {
    Error::ShapeMismatch { op, lhs: a.label(a_fallback), lhs_dims: a.dims(), rhs: b.label(b_fallback), rhs_dims: b.dims() }
}

/// Clones the values only; the copy is a new, uninstrumented buffer.
impl Clone for Matrix {
    fn clone(&self) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.clone(), probe: None }
    }
}

impl PartialEq for Matrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Matrix");
        s.field("rows", &self.rows).field("cols", &self.cols);
        if let Some(name) = self.name() {
            s.field("buffer", &name);
        }
        if self.data.len() <= 64 {
            s.field("data", &self.data);
        }
        s.finish()
    }
}

/// Problem dimensions of one MLP block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct MlpShape {
    pub batch: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl MlpShape {
    pub fn new(batch: usize, d_model: usize, d_ff: usize) -> Result<Self> {
        if batch == 0 || d_model == 0 || d_ff == 0 {
            return Err(Error::InvalidDimension(format!("MLP shape must be positive, got B={batch}, d_model={d_model}, d_ff={d_ff}")));
        }
        Ok(Self { batch, d_model, d_ff })
    }

    pub fn ff_ratio(&self) -> f64 {
        self.d_ff as f64 / self.d_model as f64
    }

    /// True when d_ff/d_model lies in the usual [3.5, 4.0] band of
    /// production SwiGLU blocks. Other ratios are allowed, only flagged.
    pub fn has_typical_ratio(&self) -> bool {
        (3.5..=4.0).contains(&self.ff_ratio())
    }
}

impl fmt::Display for MlpShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B={} d_model={} d_ff={}", self.batch, self.d_model, self.d_ff)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn check_matmul(a: &Matrix, b: &Matrix, out: &Matrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(shape_error("matmul", a, "A", b, "B"));
    }
    if out.rows != a.rows || out.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: out.label("out"),
            lhs_dims: out.dims(),
            rhs: "A*B".into(),
            rhs_dims: (a.rows, b.cols),
        });
    }
    Ok(())
}

/// `out = a (m x k) * b (k x n)` on plain slices, i-k-j order.
///
/// Each output element is accumulated from 0.0 in ascending `p`, the same
/// summation order as the textbook inner product, so every GEMM route in
/// the crate produces bit-identical values.
pub(crate) fn gemm_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Naive GEMM: `out = a * b`.
///
/// With instrumentation on, accesses follow the textbook inner-product
/// loop: every `a` element is read `n` times, every `b` element `m` times,
/// and every `out` element is written once after its full reduction.
pub fn matmul(a: &Matrix, b: &Matrix, out: &mut Matrix) -> Result<()> {
    check_matmul(a, b, out)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if a.is_instrumented() || b.is_instrumented() || out.is_instrumented() {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, acc);
            }
        }
    } else {
        gemm_into(&a.data, &b.data, m, k, n, &mut out.data);
    }
    Ok(())
}

/// GEMM under ideal intra-kernel reuse: each input element is read once and
/// each output element written once. Values are identical to [`matmul`].
pub fn matmul_cached(a: &Matrix, b: &Matrix, out: &mut Matrix) -> Result<()> {
    check_matmul(a, b, out)?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut acc = vec![0.0; m * n];
    gemm_into(a.load_all(), b.load_all(), m, k, n, &mut acc);
    out.store_all(&acc);
    Ok(())
}

/// `out = a ⊗ b`. Reads each input element once, writes each output once.
pub fn elementwise_mul(a: &Matrix, b: &Matrix, out: &mut Matrix) -> Result<()> {
    a.check_same_shape(b, "elementwise_mul")?;
    if out.dims() != a.dims() {
        return Err(shape_error("elementwise_mul", out, "out", a, "A"));
    }
    let prod: Vec<f64> = a.load_all().iter().zip(b.load_all()).map(|(x, y)| x * y).collect();
    out.store_all(&prod);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut out = Matrix::zeros(2, 2).unwrap();
        matmul(&a, &Matrix::identity(2).unwrap(), &mut out).unwrap();
        assert_eq!(out, a);

        let b = Matrix::from_rows(&[[5.0], [7.0]]).unwrap();
        let mut out = Matrix::zeros(2, 1).unwrap();
        matmul(&Matrix::identity(2).unwrap(), &b, &mut out).unwrap();
        assert_eq!(out, b);

        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        let mut out = Matrix::zeros(1, 1).unwrap();
        matmul(&a, &b, &mut out).unwrap();
        assert_eq!(out.values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_operands() {
        let ledger = AccessLedger::new();
        let a = Matrix::zeros(2, 3).unwrap().instrumented(&ledger, "X");
        let b = Matrix::zeros(2, 2).unwrap();
        let mut out = Matrix::zeros(2, 2).unwrap();
        let msg = matmul(&a, &b, &mut out).unwrap_err().to_string();
        assert!(msg.contains("X is 2x3"), "{msg}");
        assert!(msg.contains("B is 2x2"), "{msg}");
    }

    #[test]
    fn sigmoid_and_silu_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() <= 1e-15);
        assert!((sigmoid(1.0) - 0.7310585786300049).abs() <= 1e-16);
        assert_eq!(silu(0.0), 0.0);
        assert!(silu(-50.0).abs() <= 1e-15);
        assert!((silu(1.0) - 0.7310585786300049).abs() <= 1e-16);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
    }

    #[test]
    fn elementwise_examples() {
        let a = Matrix::from_rows(&[[2.0, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[[4.0, 5.0]]).unwrap();
        let mut out = Matrix::zeros(1, 2).unwrap();
        elementwise_mul(&a, &b, &mut out).unwrap();
        assert_eq!(out.values(), &[8.0, 15.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random(3, 4, 1.0, &mut rng).unwrap();
        let mut out = Matrix::zeros(3, 4).unwrap();
        elementwise_mul(&a, &Matrix::filled(3, 4, 1.0).unwrap(), &mut out).unwrap();
        assert_eq!(out, a);
        elementwise_mul(&Matrix::zeros(3, 4).unwrap(), &a, &mut out).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));

        let err = elementwise_mul(&a, &Matrix::zeros(4, 3).unwrap(), &mut out);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matrix_rejects_empty_and_bad_lengths() {
        assert!(Matrix::zeros(0, 3).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(MlpShape::new(1, 0, 4).is_err());
    }

    #[test]
    fn shape_ratio_flag() {
        assert!(MlpShape::new(1, 512, 2048).unwrap().has_typical_ratio());
        assert!(MlpShape::new(1, 4096, 14336).unwrap().has_typical_ratio());
        assert!(!MlpShape::new(1, 4, 8).unwrap().has_typical_ratio());
    }

    #[test]
    fn naive_matmul_access_counts() {
        let ledger = AccessLedger::new();
        let (m, k, n) = (3, 4, 5);
        let a = Matrix::filled(m, k, 1.0).unwrap().instrumented(&ledger, "A");
        let b = Matrix::filled(k, n, 1.0).unwrap().instrumented(&ledger, "B");
        let mut out = Matrix::zeros(m, n).unwrap().instrumented(&ledger, "C");
        matmul(&a, &b, &mut out).unwrap();
        assert_eq!(ledger.count("A").unwrap(), AccessCount::new((m * k * n) as u64, 0));
        assert_eq!(ledger.count("B").unwrap(), AccessCount::new((k * n * m) as u64, 0));
        assert_eq!(ledger.count("C").unwrap(), AccessCount::new(0, (m * n) as u64));

        ledger.reset();
        matmul_cached(&a, &b, &mut out).unwrap();
        assert_eq!(ledger.count("A").unwrap(), AccessCount::new((m * k) as u64, 0));
        assert_eq!(ledger.count("B").unwrap(), AccessCount::new((k * n) as u64, 0));
        assert_eq!(ledger.count("C").unwrap(), AccessCount::new(0, (m * n) as u64));
    }

    #[test]
    fn ledger_counts_are_exact_under_concurrency() {
        let ledger = AccessLedger::new();
        let m = Matrix::zeros(8, 8).unwrap().instrumented(&ledger, "shared");
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for r in 0..8 {
                        let _ = m.load_row_span(r, 0, 8);
                    }
                });
            }
        });
        assert_eq!(ledger.count("shared").unwrap().reads, 8 * 64);
    }

    #[test]
    fn clone_is_uninstrumented() {
        let ledger = AccessLedger::new();
        let m = Matrix::zeros(2, 2).unwrap().instrumented(&ledger, "M");
        let c = m.clone();
        assert!(!c.is_instrumented());
        let _ = c.get(0, 0);
        assert_eq!(ledger.count("M").unwrap().reads, 0);
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random(m, k, 1.0, &mut rng).unwrap();
            let b = Matrix::random(k, n, 1.0, &mut rng).unwrap();
            let mut out = Matrix::zeros(m, n).unwrap();
            matmul(&a, &b, &mut out).unwrap();
            for (x, y) in out.values().iter().zip(oracle_matmul(&a, &b)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn instrumentation_is_neutral(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random(m, k, 1.0, &mut rng).unwrap();
            let b = Matrix::random(k, n, 1.0, &mut rng).unwrap();
            let mut plain = Matrix::zeros(m, n).unwrap();
            matmul(&a, &b, &mut plain).unwrap();

            let ledger = AccessLedger::new();
            let ai = a.clone().instrumented(&ledger, "A");
            let bi = b.clone().instrumented(&ledger, "B");
            let mut raw = Matrix::zeros(m, n).unwrap().instrumented(&ledger, "C");
            matmul(&ai, &bi, &mut raw).unwrap();
            let mut cached = Matrix::zeros(m, n).unwrap().instrumented(&ledger, "C2");
            matmul_cached(&ai, &bi, &mut cached).unwrap();

            let bits = |m: &Matrix| m.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&plain), bits(&raw));
            prop_assert_eq!(bits(&plain), bits(&cached));
        }

        #[test]
        fn silu_odd_part_is_identity(x in -20.0f64..20.0) {
            prop_assert!((silu(x) - silu(-x) - x).abs() <= 1e-12);
        }
    }
}
