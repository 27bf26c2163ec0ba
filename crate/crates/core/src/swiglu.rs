//! Reference SwiGLU executors: the four-kernel and two-kernel layouts and
//! the down projection shared by every variant.
//!
//! Stage 1 computes `A_2 = (X W_up) ⊗ SiLU(X W_gate)`; stage 2 is the plain
//! GEMM `Y = A_2 W_down`. Global buffers created by an instrumented run use
//! the names in [`buffers`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, elementwise_mul, shape_error, silu, AccessLedger, Matrix, MlpShape};

/// Global buffer names used by the instrumented executors.
pub mod buffers {
    pub const X: &str = "X";
    pub const W_UP: &str = "W_Up";
    pub const W_GATE: &str = "W_Gate";
    pub const W_DOWN: &str = "W_Down";
    pub const A_GATE: &str = "A_gate";
    pub const A_1: &str = "A_1";
    pub const A_SILU: &str = "A_silu";
    /// Concatenated `[A_gate | A_1]` output of the grouped GEMM, gate columns first.
    pub const A_GATE_UP: &str = "A_gate_up";
    pub const A_2: &str = "A_2";
    pub const Y: &str = "Y";
}

/// Execution layout of stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum VariantTag {
    /// Two GEMMs and two pointwise passes, every intermediate materialized.
    FourKernel,
    /// Grouped GEMM into `[A_gate | A_1]`, then a fused silu-and-mul pass.
    TwoKernel,
    /// Single tiled pass; only `A_2` reaches global memory.
    Fused,
}

impl VariantTag {
    pub const ALL: [VariantTag; 3] = [VariantTag::FourKernel, VariantTag::TwoKernel, VariantTag::Fused];

    /// Scheduler tie-break rank; higher means deeper fusion.
    pub fn fusion_depth(self) -> u8 {
        match self {
            VariantTag::FourKernel => 0,
            VariantTag::TwoKernel => 1,
            VariantTag::Fused => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantTag::FourKernel => "four_kernel",
            VariantTag::TwoKernel => "two_kernel",
            VariantTag::Fused => "fused",
        }
    }
}

impl fmt::Display for VariantTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for VariantTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "four_kernel" | "fourkernel" | "four" => Ok(VariantTag::FourKernel),
            "two_kernel" | "twokernel" | "two" => Ok(VariantTag::TwoKernel),
            "fused" => Ok(VariantTag::Fused),
            _ => Err(Error::UnknownExecutor(s.to_owned())),
        }
    }
}

/// How naive GEMM kernels charge their input reads to the ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Accounting {
    /// Perfect intra-kernel caching: one read per input element per kernel.
    #[default]
    Ideal,
    /// Textbook inner-product access, no caching. Diagnostics only.
    Raw,
}

/// Weights of one SwiGLU block.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w_up: Matrix,
    pub w_gate: Matrix,
    pub w_down: Matrix,
}

impl MlpWeights {
    pub fn new(w_up: Matrix, w_gate: Matrix, w_down: Matrix) -> Result<Self> {
        let (d_model, d_ff) = w_up.dims();
        if w_gate.dims() != (d_model, d_ff) {
            return Err(shape_error("MlpWeights", &w_gate, "W_Gate", &w_up, "W_Up"));
        }
        if w_down.dims() != (d_ff, d_model) {
            return Err(shape_error("MlpWeights", &w_down, "W_Down", &w_up, "W_Up"));
        }
        Ok(Self { w_up, w_gate, w_down })
    }

    /// Entries uniform in `[-scale, scale)`, drawn up, gate, down in that order.
    pub fn random<R: Rng + ?Sized>(d_model: usize, d_ff: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let w_up = Matrix::random(d_model, d_ff, scale, rng)?;
        let w_gate = Matrix::random(d_model, d_ff, scale, rng)?;
        let w_down = Matrix::random(d_ff, d_model, scale, rng)?;
        Self::new(w_up, w_gate, w_down)
    }

    pub fn d_model(&self) -> usize {
        self.w_up.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_up.cols()
    }

    pub fn shape(&self, batch: usize) -> Result<MlpShape> {
        MlpShape::new(batch, self.d_model(), self.d_ff())
    }

    pub fn instrument(&mut self, ledger: &Arc<AccessLedger>) {
        self.w_up.instrument(ledger, buffers::W_UP);
        self.w_gate.instrument(ledger, buffers::W_GATE);
        self.w_down.instrument(ledger, buffers::W_DOWN);
    }

    pub(crate) fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d_model() {
            return Err(shape_error("SwiGLU input", x, "X", &self.w_up, "W_Up"));
        }
        Ok(())
    }
}

fn gemm(a: &Matrix, b: &Matrix, out: &mut Matrix, accounting: Accounting) -> Result<()> {
    match accounting {
        Accounting::Ideal => tensor::matmul_cached(a, b, out),
        Accounting::Raw => tensor::matmul(a, b, out),
    }
}

/// Pointwise `out = SiLU(a)`.
pub fn silu_kernel(a: &Matrix, out: &mut Matrix) -> Result<()> {
    a.check_same_shape(out, "silu")?;
    let v: Vec<f64> = a.load_all().iter().map(|&g| silu(g)).collect();
    out.store_all(&v);
    Ok(())
}

/// Stage 1 of the four-kernel layout, returning `A_2`.
///
/// Launches: `A_gate = X W_gate`, `A_1 = X W_up`, `A_silu = SiLU(A_gate)`,
/// `A_2 = A_1 ⊗ A_silu`.
pub fn four_kernel_stage1(x: &Matrix, w: &MlpWeights, accounting: Accounting) -> Result<Matrix> {
    w.check_input(x)?;
    let (b, f) = (x.rows(), w.d_ff());
    let mut a_gate = x.zeros_on_ledger_of(b, f, buffers::A_GATE)?;
    gemm(x, &w.w_gate, &mut a_gate, accounting)?;
    let mut a_1 = x.zeros_on_ledger_of(b, f, buffers::A_1)?;
    gemm(x, &w.w_up, &mut a_1, accounting)?;
    let mut a_silu = x.zeros_on_ledger_of(b, f, buffers::A_SILU)?;
    silu_kernel(&a_gate, &mut a_silu)?;
    let mut a_2 = x.zeros_on_ledger_of(b, f, buffers::A_2)?;
    elementwise_mul(&a_1, &a_silu, &mut a_2)?;
    Ok(a_2)
}

/// Grouped GEMM writing `[X W_gate | X W_up]` (gate columns first).
///
/// Each `X` element feeds both projections from one load, which is what
/// halves the `X` traffic relative to two separate GEMMs.
pub fn grouped_gemm(x: &Matrix, w_gate: &Matrix, w_up: &Matrix, out: &mut Matrix, accounting: Accounting) -> Result<()> {
    let (m, k) = x.dims();
    let n = w_gate.cols();
    if w_gate.rows() != k {
        return Err(shape_error("grouped_gemm", x, "X", w_gate, "W_Gate"));
    }
    if w_up.dims() != w_gate.dims() {
        return Err(shape_error("grouped_gemm", w_up, "W_Up", w_gate, "W_Gate"));
    }
    if out.dims() != (m, 2 * n) {
        return Err(Error::ShapeMismatch {
            op: "grouped_gemm",
            lhs: out.name().unwrap_or("out").to_owned(),
            lhs_dims: out.dims(),
            rhs: "[A_gate | A_1]".into(),
            rhs_dims: (m, 2 * n),
        });
    }
    match accounting {
        Accounting::Raw => {
            for i in 0..m {
                for j in 0..n {
                    let (mut g, mut u) = (0.0, 0.0);
                    for p in 0..k {
                        let xv = x.get(i, p);
                        g += xv * w_gate.get(p, j);
                        u += xv * w_up.get(p, j);
                    }
                    out.set(i, j, g);
                    out.set(i, n + j, u);
                }
            }
        }
        Accounting::Ideal => {
            let xs = x.load_all();
            let (wg, wu) = (w_gate.load_all(), w_up.load_all());
            let mut acc = vec![0.0; m * 2 * n];
            for i in 0..m {
                let (g_row, u_row) = acc[i * 2 * n..(i + 1) * 2 * n].split_at_mut(n);
                for (p, &xv) in xs[i * k..(i + 1) * k].iter().enumerate() {
                    let g = &wg[p * n..(p + 1) * n];
                    let u = &wu[p * n..(p + 1) * n];
                    for j in 0..n {
                        g_row[j] += xv * g[j];
                        u_row[j] += xv * u[j];
                    }
                }
            }
            out.store_all(&acc);
        }
    }
    Ok(())
}

/// Fused silu-and-mul over the concatenated buffer: `A_2 = A_1 ⊗ SiLU(A_gate)`.
pub fn silu_and_mul(gate_up: &Matrix, out: &mut Matrix) -> Result<()> {
    let (m, two_n) = gate_up.dims();
    if two_n % 2 != 0 || out.dims() != (m, two_n / 2) {
        return Err(shape_error("silu_and_mul", gate_up, "[A_gate | A_1]", out, "A_2"));
    }
    let n = two_n / 2;
    let src = gate_up.load_all();
    let mut a2 = Vec::with_capacity(m * n);
    for row in src.chunks_exact(two_n) {
        let (g, u) = row.split_at(n);
        a2.extend(u.iter().zip(g).map(|(&u, &g)| u * silu(g)));
    }
    out.store_all(&a2);
    Ok(())
}

/// Stage 1 of the two-kernel layout, returning `A_2`.
pub fn two_kernel_stage1(x: &Matrix, w: &MlpWeights, accounting: Accounting) -> Result<Matrix> {
    w.check_input(x)?;
    let (b, f) = (x.rows(), w.d_ff());
    let mut gate_up = x.zeros_on_ledger_of(b, 2 * f, buffers::A_GATE_UP)?;
    grouped_gemm(x, &w.w_gate, &w.w_up, &mut gate_up, accounting)?;
    let mut a_2 = x.zeros_on_ledger_of(b, f, buffers::A_2)?;
    silu_and_mul(&gate_up, &mut a_2)?;
    Ok(a_2)
}

/// Stage 2, `Y = A_2 W_down`, shared by all variants.
pub fn down_projection(a2: &Matrix, w_down: &Matrix) -> Result<Matrix> {
    down_projection_with(a2, w_down, Accounting::Ideal)
}

pub fn down_projection_with(a2: &Matrix, w_down: &Matrix, accounting: Accounting) -> Result<Matrix> {
    if a2.cols() != w_down.rows() {
        return Err(shape_error("down_projection", a2, "A_2", w_down, "W_Down"));
    }
    let mut y = a2.zeros_on_ledger_of(a2.rows(), w_down.cols(), buffers::Y)?;
    gemm(a2, w_down, &mut y, accounting)?;
    Ok(y)
}

pub fn run_four_kernel(x: &Matrix, w: &MlpWeights) -> Result<Matrix> {
    let a2 = four_kernel_stage1(x, w, Accounting::Ideal)?;
    down_projection(&a2, &w.w_down)
}

pub fn run_two_kernel(x: &Matrix, w: &MlpWeights) -> Result<Matrix> {
    let a2 = two_kernel_stage1(x, w, Accounting::Ideal)?;
    down_projection(&a2, &w.w_down)
}
