//! Command-line front end; the binary is a thin wrapper over [`cli_entry`].

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autotune::{candidate_set_fingerprint, default_candidates, Autotuner};
use crate::bench::{emit_report, run_sweep, BenchConfig, ReportFormat};
use crate::error::{Error, Result};
use crate::executor;
use crate::fused::{FusedMutant, KernelConfig, TileConfig};
use crate::swiglu::{MlpWeights, VariantTag};
use crate::tensor::{Matrix, MlpShape};
use crate::tp::{make_plan, run_naive_tp_mlp, run_tp_mlp, CollectiveKind};
use crate::traffic::{arithmetic_intensity, predict_traffic};
use crate::verify::{run_verify, VerifyOptions, EQUIVALENCE_TOLERANCE, TP_DEVICE_COUNTS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CACHE_ENV: &str = "DEEPFUSION_CACHE";
pub const DEFAULT_CACHE_PATH: &str = "deepfusion-tune.toml";

#[derive(Debug, Parser)]
#[command(name = "deepfusion", version, about = "Fused SwiGLU kernels: benchmarks, traffic model, tuning and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode-throughput sweep over batch sizes and step counts.
    Bench(Common),
    /// Predicted memory traffic and arithmetic intensity per variant.
    Traffic(Common),
    /// Profile candidate kernels and store the choice in the tuning cache.
    Tune(Common),
    /// Compare tensor-parallel blocks with the single-device block.
    TpCheck(Common),
    /// Run the full invariant suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MutantArg {
    SiluPerChunk,
    SpillGate,
}

impl From<MutantArg> for FusedMutant {
    fn from(m: MutantArg) -> Self {
        match m {
            MutantArg::SiluPerChunk => FusedMutant::SiluPerChunk,
            MutantArg::SpillGate => FusedMutant::SpillGate,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct Common {
    #[arg(long, default_value_t = 512)]
    d_model: usize,
    #[arg(long, default_value_t = 2048)]
    d_ff: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
    batch: Vec<usize>,
    /// Comma-separated decode step counts.
    #[arg(long, value_delimiter = ',', default_value = "8,64")]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    reps: usize,
    /// Comma-separated subset of four_kernel, two_kernel, fused.
    #[arg(long, value_delimiter = ',', default_value = "four_kernel,two_kernel,fused")]
    variants: Vec<VariantTag>,
    /// Tensor-parallel device count.
    #[arg(long)]
    tp: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// csv or markdown.
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    #[arg(long, env = CACHE_ENV)]
    cache_path: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Skip the host-dependent timing comparison.
    #[arg(long)]
    skip_timing: bool,
    #[arg(long, hide = true, value_enum)]
    mutant: Option<MutantArg>,
}

impl Common {
    fn variants(&self) -> Vec<VariantTag> {
        let mut v = Vec::new();
        for t in &self.variants {
            if !v.contains(t) {
                v.push(*t);
            }
        }
        v
    }

    fn shapes(&self) -> Result<Vec<MlpShape>> {
        self.batch.iter().map(|&b| MlpShape::new(b, self.d_model, self.d_ff)).collect()
    }

    fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            num_layers: self.layers,
            batch_sizes: self.batch.clone(),
            decode_steps: self.steps.clone(),
            repetitions: self.reps,
            variants: self.variants(),
            tp_devices: self.tp.unwrap_or(1),
            seed: self.seed,
            output_format: self.format,
            cache_path: self.cache_path.clone(),
            ..BenchConfig::default()
        }
    }

    fn cache_path(&self) -> PathBuf {
        self.cache_path.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_PATH))
    }
}

/// Report text plus whether every invariant held.
struct Outcome {
    text: String,
    ok: bool,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            r => r?,
        },
    }
    Ok(())
}

fn cmd_bench(c: &Common) -> Result<Outcome> {
    let rows = run_sweep(&c.bench_config())?;
    Ok(Outcome { text: emit_report(&rows, c.format)?, ok: true })
}

fn cmd_traffic(c: &Common) -> Result<Outcome> {
    let mut rows = Vec::new();
    for shape in c.shapes()? {
        for v in c.variants() {
            let tile = (v == VariantTag::Fused).then(|| TileConfig::single_tile(&shape));
            let report = predict_traffic(v, &shape, tile.as_ref())?;
            rows.push([
                shape.batch.to_string(),
                shape.d_model.to_string(),
                shape.d_ff.to_string(),
                v.to_string(),
                report.stage1_elements.to_string(),
                report.total_elements.to_string(),
                report.total_bytes.to_string(),
                arithmetic_intensity(v, &shape, tile.as_ref())?.to_string(),
            ]);
        }
    }
    let header = ["batch", "d_model", "d_ff", "variant", "stage1_elements", "total_elements", "total_bytes", "stage1_flops_per_byte"];
    let text = match c.format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(header)?;
            for r in &rows {
                w.write_record(r)?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is utf-8")
        }
        ReportFormat::Markdown => {
            let mut s = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
            for r in &rows {
                let _ = writeln!(s, "| {} |", r.join(" | "));
            }
            s
        }
    };
    Ok(Outcome { text, ok: true })
}

fn cmd_tune(c: &Common) -> Result<Outcome> {
    let path = c.cache_path();
    let tuner = Autotuner::new(1, c.reps.max(3), c.seed, Some(path.clone()));
    let variants = c.variants();
    let fingerprint = candidate_set_fingerprint(&variants);
    let mut text = String::new();
    for shape in c.shapes()? {
        let candidates: Vec<KernelConfig> = default_candidates(&shape).into_iter().filter(|k| variants.contains(&k.variant)).collect();
        let refs: Vec<&KernelConfig> = candidates.iter().collect();
        let outcome = tuner.tune(&shape, &fingerprint, &refs)?;
        let entry = &outcome.entry;
        if outcome.cache_hit {
            let _ = writeln!(text, "{shape}: cache hit, chosen {} (profiling skipped)", entry.chosen);
        } else {
            let disq = entry.all_results.iter().filter(|r| !r.is_qualified()).count();
            let median = entry.all_results.iter().find(|r| r.config_label == entry.chosen).map_or(0, |r| r.median_ns);
            let _ = writeln!(
                text,
                "{shape}: profiled {} candidates ({disq} disqualified), chosen {} at {median} ns median",
                entry.all_results.len(),
                entry.chosen
            );
        }
    }
    let _ = writeln!(text, "cache: {}", path.display());
    Ok(Outcome { text, ok: true })
}

fn cmd_tp_check(c: &Common) -> Result<Outcome> {
    let devices: Vec<usize> = match c.tp {
        Some(p) => vec![p],
        None => TP_DEVICE_COUNTS.iter().copied().filter(|&p| p <= c.d_ff).collect(),
    };
    let batch = c.batch.first().copied().unwrap_or(1);
    let shape = MlpShape::new(batch, c.d_model, c.d_ff)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let w = MlpWeights::random(shape.d_model, shape.d_ff, 1.0 / (shape.d_model as f64).sqrt(), &mut rng)?;
    let x = Matrix::random(shape.batch, shape.d_model, 1.0, &mut rng)?;
    let reference = executor::run_block(&KernelConfig::four_kernel(), &x, &w)?;
    let mut ok = true;
    let mut text = format!("tensor-parallel check on {shape}\n");
    for v in c.variants() {
        let config = match v {
            VariantTag::FourKernel => KernelConfig::four_kernel(),
            VariantTag::TwoKernel => KernelConfig::two_kernel(),
            VariantTag::Fused => KernelConfig::fused(TileConfig::single_tile(&shape)),
        };
        for &p in &devices {
            let (out, log) = run_tp_mlp(&x, &w, &make_plan(shape.d_ff, p)?, &config)?;
            let dev = out.max_abs_diff(&reference);
            let pass = dev <= EQUIVALENCE_TOLERANCE
                && log.len() == 1
                && log.count(CollectiveKind::AllReduce) == 1
                && log.events()[0].payload_elements_per_device == (shape.batch * shape.d_model) as u64;
            ok &= pass;
            let _ = writeln!(
                text,
                "{} {v} P={p}: max deviation {dev:e}, {} all-reduce(s), {} collective(s)",
                if pass { "PASS" } else { "FAIL" },
                log.count(CollectiveKind::AllReduce),
                log.len()
            );
        }
    }
    let p = devices.iter().copied().max().unwrap_or(1);
    let (_, naive) = run_naive_tp_mlp(&x, &w, p)?;
    let _ = writeln!(text, "naive per-GEMM scheme P={p}: {} all-gather(s)", naive.count(CollectiveKind::AllGather));
    Ok(Outcome { text, ok })
}

fn cmd_verify(a: &VerifyArgs) -> Result<Outcome> {
    let opts = VerifyOptions {
        seed: a.common.seed,
        speed_shape: if a.skip_timing { None } else { VerifyOptions::default().speed_shape },
        mutant: a.mutant.map(Into::into),
        ..VerifyOptions::default()
    };
    let report = run_verify(&opts)?;
    let ok = report.passed();
    let text = format!("{report}{}\n", if ok { "verify: all invariants hold" } else { "verify: invariant failure" });
    Ok(Outcome { text, ok })
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::InvalidDimension(_) | Error::ZeroTile(_) | Error::UnknownExecutor(_) | Error::Plan(_))
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on invariant failure or runtime
/// error, 2 on usage error.
pub fn cli_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (result, out) = match &cli.command {
        Command::Bench(c) => (cmd_bench(c), c.out.as_deref()),
        Command::Traffic(c) => (cmd_traffic(c), c.out.as_deref()),
        Command::Tune(c) => (cmd_tune(c), c.out.as_deref()),
        Command::TpCheck(c) => (cmd_tp_check(c), c.out.as_deref()),
        Command::Verify(a) => (cmd_verify(a), a.common.out.as_deref()),
    };
    match result.and_then(|o| emit(&o.text, out).map(|()| o.ok)) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_INVARIANT,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                EXIT_USAGE
            } else {
                EXIT_INVARIANT
            }
        }
    }
}
