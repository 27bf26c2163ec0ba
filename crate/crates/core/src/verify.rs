//! Runtime invariant suite behind the `verify` subcommand.
//!
//! Each check reports pass, fail or warn. Only failures make the suite
//! fail; the timing check can at most warn because it depends on the host.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autotune::{default_candidates, lower_median, profile, select_best};
use crate::error::Result;
use crate::executor;
use crate::fused::{FusedMutant, KernelConfig, LoopOrder, TileConfig};
use crate::swiglu::{MlpWeights, VariantTag};
use crate::tensor::{silu, Matrix, MlpShape};
use crate::tp::{make_plan, run_naive_tp_mlp, run_tp_mlp, CollectiveKind};
use crate::traffic::{predict_traffic, stage1_flops, verify_against_instrumented_with};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Warn,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Warn => "WARN",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl CheckOutcome {
    fn from_failures(name: &'static str, failures: Vec<String>, ok_detail: String) -> Self {
        match failures.first() {
            None => Self { name, status: Status::Pass, detail: ok_detail },
            Some(first) => Self { name, status: Status::Fail, detail: format!("{} failure(s); first: {first}", failures.len()) },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<22} {}", c.status, c.name, c.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random instances for the variant-equivalence check.
    pub instances: usize,
    /// Shape for the soft timing comparison; `None` skips it.
    pub speed_shape: Option<MlpShape>,
    pub speed_runs: usize,
    #[doc(hidden)]
    pub mutant: Option<FusedMutant>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 200, speed_shape: Some(MlpShape { batch: 1, d_model: 1024, d_ff: 4096 }), speed_runs: 20, mutant: None }
    }
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;
pub const TILING_TOLERANCE: f64 = 1e-12;
pub const TP_DEVICE_COUNTS: [usize; 5] = [1, 2, 3, 4, 8];

/// Plain triple loop, kept independent of every executor.
pub fn oracle_stage1(x: &Matrix, w: &MlpWeights) -> Matrix {
    let (b, d, f) = (x.rows(), w.d_model(), w.d_ff());
    let mut out = vec![0.0; b * f];
    for i in 0..b {
        for j in 0..f {
            let (mut up, mut gate) = (0.0, 0.0);
            for p in 0..d {
                up += x.at(i, p) * w.w_up.at(p, j);
                gate += x.at(i, p) * w.w_gate.at(p, j);
            }
            out[i * f + j] = up * silu(gate);
        }
    }
    Matrix::from_vec(b, f, out).expect("oracle shape")
}

fn random_instance(rng: &mut ChaCha8Rng, max_dim: usize) -> Result<(MlpShape, Matrix, MlpWeights)> {
    let shape = MlpShape::new(rng.random_range(1..=max_dim), rng.random_range(1..=max_dim), rng.random_range(1..=max_dim))?;
    let w = MlpWeights::random(shape.d_model, shape.d_ff, 1.0, rng)?;
    let x = Matrix::random(shape.batch, shape.d_model, 1.0, rng)?;
    Ok((shape, x, w))
}

/// Every default-grid executor against the triple-loop oracle on random
/// instances with dimensions up to 64.
pub fn check_variant_equivalence(seed: u64, instances: usize, mutant: Option<FusedMutant>) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut worst = 0.0_f64;
    let mut runs = 0usize;
    for _ in 0..instances {
        let (shape, x, w) = random_instance(&mut rng, 64)?;
        let oracle = oracle_stage1(&x, &w);
        for config in default_candidates(&shape) {
            let out = executor::run_stage1_with(&config, &x, &w, mutant)?;
            let dev = out.max_abs_diff(&oracle);
            runs += 1;
            worst = worst.max(dev);
            if dev.is_nan() || dev > EQUIVALENCE_TOLERANCE {
                failures.push(format!("{} on {shape}: deviation {dev:e}", config.label));
            }
        }
    }
    Ok(CheckOutcome::from_failures(
        "variant_equivalence",
        failures,
        format!("{runs} executor runs on {instances} instances, max deviation {worst:e}"),
    ))
}

/// Tile grid with k-splits, edge tiles and both loop orders.
pub fn tiling_grid(shape: &MlpShape) -> Vec<TileConfig> {
    let mut tiles = Vec::new();
    for order in [LoopOrder::RowMajorTiling, LoopOrder::ColumnMajorTiling] {
        for (m, n, k) in [(1, 1, 1), (2, 5, 3), (3, 7, 4), (shape.batch, shape.d_ff, shape.d_model), (4, 16, 8), (1, 24, 11)] {
            let t = TileConfig { tile_m: m, tile_n: n, tile_k: k, loop_order: order }.clamped(shape);
            if !tiles.contains(&t) {
                tiles.push(t);
            }
        }
    }
    tiles
}

/// Fused outputs across tile configurations on one instance must agree
/// pairwise, since SiLU only sees completed reductions.
pub fn check_tiling_invariance(seed: u64, mutant: Option<FusedMutant>) -> Result<CheckOutcome> {
    let shape = MlpShape::new(5, 37, 29)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = MlpWeights::random(shape.d_model, shape.d_ff, 1.0, &mut rng)?;
    let x = Matrix::random(shape.batch, shape.d_model, 1.0, &mut rng)?;
    let tiles = tiling_grid(&shape);
    let outputs = tiles.iter().map(|t| executor::run_stage1_with(&KernelConfig::fused(*t), &x, &w, mutant)).collect::<Result<Vec<_>>>()?;
    let mut failures = Vec::new();
    let mut worst = 0.0_f64;
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            let dev = outputs[i].max_abs_diff(&outputs[j]);
            worst = worst.max(dev);
            if dev.is_nan() || dev > TILING_TOLERANCE {
                failures.push(format!("{} vs {}: deviation {dev:e}", tiles[i].label(), tiles[j].label()));
            }
        }
    }
    Ok(CheckOutcome::from_failures(
        "tiling_invariance",
        failures,
        format!("{} tile configs pairwise, max deviation {worst:e}", tiles.len()),
    ))
}

/// `(variant, shape, tile)` combinations for the traffic check, including
/// tiles that do not divide the shape.
pub fn traffic_grid() -> Result<Vec<(VariantTag, MlpShape, Option<TileConfig>)>> {
    let shapes = [(1, 4, 8), (3, 5, 7), (4, 16, 64), (7, 9, 13)];
    let mut grid = Vec::new();
    for &(b, d, f) in &shapes {
        let shape = MlpShape::new(b, d, f)?;
        grid.push((VariantTag::FourKernel, shape, None));
        grid.push((VariantTag::TwoKernel, shape, None));
        for order in [LoopOrder::RowMajorTiling, LoopOrder::ColumnMajorTiling] {
            for (m, n, k) in [(1, 1, 1), (2, 3, 2), (2, 5, 3), (3, 4, 5), (b, f, d), (4, 6, 4), (5, 16, 3)] {
                grid.push((VariantTag::Fused, shape, Some(TileConfig::new(m, n, k, order)?)));
            }
        }
    }
    Ok(grid)
}

/// Instrumented counts against the closed-form prediction, per buffer.
pub fn check_traffic_exactness(seed: u64, mutant: Option<FusedMutant>) -> Result<CheckOutcome> {
    let grid = traffic_grid()?;
    let mut failures = Vec::new();
    for (i, (variant, shape, tile)) in grid.iter().enumerate() {
        let diff = verify_against_instrumented_with(*variant, shape, tile.as_ref(), seed.wrapping_add(i as u64), mutant)?;
        if !diff.is_empty() {
            let what = tile.map_or_else(|| variant.to_string(), |t| t.label());
            failures.push(format!("{what} on {shape}: {diff}"));
        }
    }
    Ok(CheckOutcome::from_failures("traffic_exactness", failures, format!("{} combinations match per buffer", grid.len())))
}

/// Two-kernel minus single-tile fused stage-1 traffic is `4·B·d_ff`,
/// ordering is strict across the grid, and FLOPs do not depend on the variant.
pub fn check_traffic_ordering(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for _ in 0..50 {
        let shape = MlpShape::new(rng.random_range(1..=256), rng.random_range(1..=1024), rng.random_range(1..=4096))?;
        let two = predict_traffic(VariantTag::TwoKernel, &shape, None)?.stage1_elements;
        let fused = predict_traffic(VariantTag::Fused, &shape, Some(&TileConfig::single_tile(&shape)))?.stage1_elements;
        let expected = 4 * shape.batch as u64 * shape.d_ff as u64;
        if two - fused != expected {
            failures.push(format!("{shape}: saving {} != {expected}", two - fused));
        }
    }
    for (variant, shape, tile) in traffic_grid()? {
        if variant != VariantTag::Fused {
            continue;
        }
        let four = predict_traffic(VariantTag::FourKernel, &shape, None)?.stage1_elements;
        let two = predict_traffic(VariantTag::TwoKernel, &shape, None)?.stage1_elements;
        let fused = predict_traffic(VariantTag::Fused, &shape, tile.as_ref())?.stage1_elements;
        // Heavily re-read tilings can exceed the two-kernel count; the claim is
        // about tiles that keep one operand resident.
        let t = tile.expect("fused grid entries carry a tile");
        let resident = match t.loop_order {
            LoopOrder::RowMajorTiling => t.tile_m >= shape.batch,
            LoopOrder::ColumnMajorTiling => t.tile_n >= shape.d_ff,
        };
        if !(two < four) || (resident && !(fused < two)) {
            failures.push(format!("{} on {shape}: fused {fused}, two {two}, four {four}", t.label()));
        }
        let flops = stage1_flops(&shape);
        if flops != 4 * (shape.batch * shape.d_model * shape.d_ff + shape.batch * shape.d_ff) as u64 {
            failures.push(format!("{shape}: unexpected FLOP count {flops}"));
        }
    }
    Ok(CheckOutcome::from_failures(
        "traffic_ordering",
        failures,
        "saving is 4·B·d_ff on 50 shapes; fused < two_kernel < four_kernel".into(),
    ))
}

/// Compound tensor-parallel block against the single-device block.
pub fn check_tp_equivalence(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = MlpShape::new(3, 24, 40)?;
    let w = MlpWeights::random(shape.d_model, shape.d_ff, 1.0, &mut rng)?;
    let x = Matrix::random(shape.batch, shape.d_model, 1.0, &mut rng)?;
    let tile = TileConfig::new(2, 8, 7, LoopOrder::RowMajorTiling)?;
    let executors = [KernelConfig::four_kernel(), KernelConfig::two_kernel(), KernelConfig::fused(tile)];
    let reference = executor::run_block(&KernelConfig::four_kernel(), &x, &w)?;
    let mut failures = Vec::new();
    for config in &executors {
        for p in TP_DEVICE_COUNTS {
            let plan = make_plan(shape.d_ff, p)?;
            let (out, log) = run_tp_mlp(&x, &w, &plan, config)?;
            let dev = out.max_abs_diff(&reference);
            if dev.is_nan() || dev > EQUIVALENCE_TOLERANCE {
                failures.push(format!("{} with P={p}: deviation {dev:e}", config.label));
            }
            let expected_payload = (shape.batch * shape.d_model) as u64;
            let events = log.events();
            if events.len() != 1 || events[0].kind != CollectiveKind::AllReduce || events[0].payload_elements_per_device != expected_payload
            {
                failures.push(format!("{} with P={p}: collectives {events:?}", config.label));
            }
        }
    }
    let (naive_out, naive_log) = run_naive_tp_mlp(&x, &w, 4)?;
    if naive_log.len() < 2 {
        failures.push(format!("naive scheme logged only {} collective(s)", naive_log.len()));
    }
    if naive_out.max_abs_diff(&reference) > EQUIVALENCE_TOLERANCE {
        failures.push("naive scheme output differs from single device".into());
    }
    Ok(CheckOutcome::from_failures(
        "tp_equivalence",
        failures,
        format!("P in {TP_DEVICE_COUNTS:?}, one all-reduce of B·d_model each; naive logs {}", naive_log.len()),
    ))
}

/// Median stage-1 wall times for four-kernel, two-kernel and the fastest
/// profiled fused tile, sampled interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSample {
    pub fused_label: String,
    pub four_kernel_ns: u64,
    pub two_kernel_ns: u64,
    pub fused_ns: u64,
}

impl SpeedSample {
    pub fn fused_vs_two(&self) -> f64 {
        self.fused_ns as f64 / self.two_kernel_ns as f64
    }

    pub fn fused_vs_four(&self) -> f64 {
        self.fused_ns as f64 / self.four_kernel_ns as f64
    }
}

pub fn measure_speed(shape: &MlpShape, runs: usize, seed: u64) -> Result<SpeedSample> {
    let fused: Vec<KernelConfig> = default_candidates(shape).into_iter().filter(|c| c.variant == VariantTag::Fused).collect();
    let refs: Vec<&KernelConfig> = fused.iter().collect();
    let tuned = profile(&refs, shape, 1, 3, seed)?;
    let fused = KernelConfig::from_label(&select_best(&tuned)?.config_label)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = MlpWeights::random(shape.d_model, shape.d_ff, 1.0, &mut rng)?;
    let x = Matrix::random(shape.batch, shape.d_model, 1.0, &mut rng)?;
    let configs = [KernelConfig::four_kernel(), KernelConfig::two_kernel(), fused];
    let mut samples = [Vec::new(), Vec::new(), Vec::new()];
    for c in &configs {
        black_box(executor::run_stage1(c, &x, &w)?);
    }
    for _ in 0..runs {
        for (c, s) in configs.iter().zip(samples.iter_mut()) {
            let start = Instant::now();
            black_box(executor::run_stage1(c, black_box(&x), &w)?);
            s.push(u64::try_from(start.elapsed().as_nanos()).unwrap_or(u64::MAX));
        }
    }
    let [four, two, fused_s] = samples;
    Ok(SpeedSample {
        fused_label: configs[2].label.clone(),
        four_kernel_ns: lower_median(&four),
        two_kernel_ns: lower_median(&two),
        fused_ns: lower_median(&fused_s),
    })
}

/// Soft check: fused within 5% of two-kernel and no slower than four-kernel.
pub fn check_speed(shape: &MlpShape, runs: usize, seed: u64) -> Result<CheckOutcome> {
    let s = measure_speed(shape, runs, seed)?;
    let ok = s.fused_vs_two() <= 1.05 && s.fused_vs_four() <= 1.0;
    Ok(CheckOutcome {
        name: "speed_sanity",
        status: if ok { Status::Pass } else { Status::Warn },
        detail: format!(
            "{shape}, median of {runs}: {} {:.3} ms, fused/two_kernel {:.3}, fused/four_kernel {:.3}",
            s.fused_label,
            s.fused_ns as f64 / 1e6,
            s.fused_vs_two(),
            s.fused_vs_four()
        ),
    })
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = vec![
        check_variant_equivalence(opts.seed, opts.instances, opts.mutant)?,
        check_tiling_invariance(opts.seed, opts.mutant)?,
        check_traffic_exactness(opts.seed, opts.mutant)?,
        check_traffic_ordering(opts.seed)?,
        check_tp_equivalence(opts.seed)?,
    ];
    if let Some(shape) = &opts.speed_shape {
        checks.push(check_speed(shape, opts.speed_runs, opts.seed)?);
    }
    Ok(VerifyReport { checks })
}
