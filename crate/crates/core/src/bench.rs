//! Decode-throughput sweep and report formatting.
//!
//! A "decode step" is one forward pass of a `batch`-row input through
//! `num_layers` MLP blocks, with an RMS norm between blocks. Attention and
//! KV caches are not modelled, so tokens/s does not fall with step count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autotune::{candidate_set_fingerprint, default_candidates, Autotuner, ScheduleEntry};
use crate::error::{Error, Result};
use crate::executor;
use crate::fused::{KernelConfig, TileConfig};
use crate::swiglu::{MlpWeights, VariantTag};
use crate::tensor::{Matrix, MlpShape};
use crate::tp::{make_plan, run_tp_mlp};
use crate::traffic::predict_traffic;

/// Refuse sweeps whose matrices would need more than this many bytes.
pub const DEFAULT_MEMORY_LIMIT_BYTES: u64 = 4 << 30;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::Config(format!("unknown report format `{other}` (expected csv or markdown)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    pub batch_sizes: Vec<usize>,
    pub decode_steps: Vec<usize>,
    pub repetitions: usize,
    pub variants: Vec<VariantTag>,
    pub tp_devices: usize,
    pub seed: u64,
    pub output_format: ReportFormat,
    pub cache_path: Option<PathBuf>,
    /// Profiling runs per candidate when the scheduler is consulted.
    pub tune_runs: usize,
    pub memory_limit_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            d_ff: 2048,
            num_layers: 4,
            batch_sizes: vec![1, 4, 16, 64],
            decode_steps: vec![8, 64],
            repetitions: 4,
            variants: VariantTag::ALL.to_vec(),
            tp_devices: 1,
            seed: 0,
            output_format: ReportFormat::Csv,
            cache_path: None,
            tune_runs: 4,
            memory_limit_bytes: DEFAULT_MEMORY_LIMIT_BYTES,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 2 {
            return Err(Error::Config(format!("repetitions must be at least 2, got {}", self.repetitions)));
        }
        if self.batch_sizes.is_empty() || self.decode_steps.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("batch sizes, decode steps and variants must be non-empty".into()));
        }
        if self.num_layers == 0 || self.tp_devices == 0 || self.tune_runs < 3 {
            return Err(Error::Config("layers and tp devices must be at least 1, tune runs at least 3".into()));
        }
        if self.batch_sizes.contains(&0) || self.decode_steps.contains(&0) {
            return Err(Error::Config("batch sizes and decode steps must be at least 1".into()));
        }
        MlpShape::new(1, self.d_model, self.d_ff)?;
        if self.tp_devices > self.d_ff {
            return Err(Error::Config(format!("{} devices cannot shard d_ff={}", self.tp_devices, self.d_ff)));
        }
        Ok(())
    }

    /// Approximate bytes of f64 storage the sweep allocates at its largest batch.
    pub fn estimated_bytes(&self) -> u64 {
        let (d, f, l) = (self.d_model as u64, self.d_ff as u64, self.num_layers as u64);
        let b = self.batch_sizes.iter().copied().max().unwrap_or(1) as u64;
        // Weights, plus the widest live set of activations (four-kernel stage 1).
        let elements = l.saturating_mul(3 * d * f) + b * (3 * d + 5 * f);
        elements.saturating_mul(8)
    }

    /// Requested variants plus the FourKernel baseline, deduplicated.
    fn measured_variants(&self) -> Vec<VariantTag> {
        let mut v: BTreeSet<VariantTag> = self.variants.iter().copied().collect();
        v.insert(VariantTag::FourKernel);
        v.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub batch: usize,
    pub steps: usize,
    pub variant: VariantTag,
    pub mean_tokens_per_s: f64,
    pub std_tokens_per_s: f64,
    pub speedup_vs_baseline: f64,
    pub traffic_bytes_per_token: f64,
}

pub const CSV_COLUMNS: [&str; 7] =
    ["batch", "steps", "variant", "mean_tokens_per_s", "std_tokens_per_s", "speedup_vs_baseline", "traffic_bytes_per_token"];

/// Mean and population standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Row-wise RMS normalisation without a learned gain.
pub fn rms_norm(m: &Matrix) -> Matrix {
    let cols = m.cols();
    let mut data = m.values().to_vec();
    for row in data.chunks_mut(cols) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let scale = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Matrix::from_vec(m.rows(), cols, data).expect("shape preserved")
}

/// Picks a concrete config per variant from one scheduler decision.
fn configs_from_schedule(entry: &ScheduleEntry, variants: &[VariantTag]) -> Result<BTreeMap<VariantTag, KernelConfig>> {
    let mut out = BTreeMap::new();
    for &v in variants {
        let best = entry
            .all_results
            .iter()
            .filter(|r| r.variant == v && r.is_qualified())
            .min_by_key(|r| (r.median_ns, r.config_label.as_str()))
            .ok_or_else(|| Error::Config(format!("scheduler has no qualified {v} candidate")))?;
        out.insert(v, KernelConfig::from_label(&best.config_label)?);
    }
    Ok(out)
}

struct Layers {
    weights: Vec<MlpWeights>,
}

impl Layers {
    fn forward(&self, x: &Matrix, config: &KernelConfig, tp_devices: usize) -> Result<Matrix> {
        let mut h = x.clone();
        for (i, w) in self.weights.iter().enumerate() {
            h = if tp_devices > 1 {
                run_tp_mlp(&h, w, &make_plan(w.d_ff(), tp_devices)?, config)?.0
            } else {
                executor::run_block(config, &h, w)?
            };
            if i + 1 < self.weights.len() {
                h = rms_norm(&h);
            }
        }
        Ok(h)
    }
}

/// Sweeps every `(batch, steps, variant)` and returns one row each, in
/// that nesting order. The FourKernel baseline is always timed so speedups
/// are defined, but only requested variants are reported.
///
/// Timings use the scheduler's pick per variant; the traffic column uses
/// the single-tile fused layout so it does not depend on timing noise.
pub fn run_sweep(cfg: &BenchConfig) -> Result<Vec<ThroughputRow>> {
    cfg.validate()?;
    let required = cfg.estimated_bytes();
    if required > cfg.memory_limit_bytes {
        return Err(Error::TooLarge { required_bytes: required, limit_bytes: cfg.memory_limit_bytes });
    }
    let measured = cfg.measured_variants();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = Layers {
        weights: (0..cfg.num_layers)
            .map(|_| MlpWeights::random(cfg.d_model, cfg.d_ff, 1.0 / (cfg.d_model as f64).sqrt(), &mut rng))
            .collect::<Result<_>>()?,
    };
    let tuner = Autotuner::new(1, cfg.tune_runs, cfg.seed, cfg.cache_path.clone());
    let fingerprint = candidate_set_fingerprint(&measured);

    let mut rows = Vec::new();
    for &batch in &cfg.batch_sizes {
        let shape = MlpShape::new(batch, cfg.d_model, cfg.d_ff)?;
        let candidates: Vec<KernelConfig> = default_candidates(&shape).into_iter().filter(|c| measured.contains(&c.variant)).collect();
        let refs: Vec<&KernelConfig> = candidates.iter().collect();
        let schedule = tuner.tune(&shape, &fingerprint, &refs)?.entry;
        let configs = configs_from_schedule(&schedule, &measured)?;
        let x = Matrix::random(batch, cfg.d_model, 1.0, &mut rng)?;

        for &steps in &cfg.decode_steps {
            let mut rates: BTreeMap<VariantTag, Vec<f64>> = BTreeMap::new();
            // Interleave variants inside each repetition so drift hits all alike.
            for _ in 0..cfg.repetitions {
                for (&v, config) in &configs {
                    let start = Instant::now();
                    for _ in 0..steps {
                        std::hint::black_box(layers.forward(&x, config, cfg.tp_devices)?);
                    }
                    let secs = start.elapsed().as_secs_f64().max(1e-9);
                    rates.entry(v).or_default().push((batch * steps) as f64 / secs);
                }
            }
            let (baseline_mean, _) = mean_std(&rates[&VariantTag::FourKernel]);
            for &v in &cfg.variants {
                let (mean, std) = mean_std(&rates[&v]);
                // Structural traffic of the layout, independent of the timed tile.
                let tile = (v == VariantTag::Fused).then(|| TileConfig::single_tile(&shape));
                let block = predict_traffic(v, &shape, tile.as_ref())?;
                rows.push(ThroughputRow {
                    batch,
                    steps,
                    variant: v,
                    mean_tokens_per_s: mean,
                    std_tokens_per_s: std,
                    speedup_vs_baseline: mean / baseline_mean,
                    traffic_bytes_per_token: (cfg.num_layers as u64 * block.total_bytes) as f64 / batch as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub fn emit_report(rows: &[ThroughputRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => to_csv(rows),
        ReportFormat::Markdown => Ok(to_markdown(rows)),
    }
}

/// Floats use Rust's shortest round-trip formatting.
pub fn to_csv(rows: &[ThroughputRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.batch.to_string(),
            r.steps.to_string(),
            r.variant.as_str().to_owned(),
            r.mean_tokens_per_s.to_string(),
            r.std_tokens_per_s.to_string(),
            r.speedup_vs_baseline.to_string(),
            r.traffic_bytes_per_token.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<ThroughputRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(CSV_COLUMNS) {
        return Err(Error::Config(format!("unexpected CSV header: {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|_| Error::Config(format!("column {} is not a number: `{}`", CSV_COLUMNS[i], field(i))))
        };
        let int = |i: usize| -> Result<usize> {
            field(i).parse().map_err(|_| Error::Config(format!("column {} is not an integer: `{}`", CSV_COLUMNS[i], field(i))))
        };
        rows.push(ThroughputRow {
            batch: int(0)?,
            steps: int(1)?,
            variant: field(2).parse()?,
            mean_tokens_per_s: num(3)?,
            std_tokens_per_s: num(4)?,
            speedup_vs_baseline: num(5)?,
            traffic_bytes_per_token: num(6)?,
        });
    }
    Ok(rows)
}

/// One table per step count; rows are batch sizes, columns are variants,
/// and the highest mean in each row is bold.
pub fn to_markdown(rows: &[ThroughputRow]) -> String {
    let steps: BTreeSet<usize> = rows.iter().map(|r| r.steps).collect();
    let variants: BTreeSet<VariantTag> = rows.iter().map(|r| r.variant).collect();
    let mut out = String::new();
    for s in steps {
        let table: Vec<&ThroughputRow> = rows.iter().filter(|r| r.steps == s).collect();
        let batches: BTreeSet<usize> = table.iter().map(|r| r.batch).collect();
        let _ = writeln!(out, "### {s} decode steps (tokens/s, mean ± std)\n");
        let _ = write!(out, "| batch |");
        for v in &variants {
            let _ = write!(out, " {v} |");
        }
        let _ = write!(out, "\n|---:|");
        for _ in &variants {
            let _ = write!(out, "---:|");
        }
        out.push('\n');
        for b in batches {
            let cells: Vec<Option<&ThroughputRow>> =
                variants.iter().map(|v| table.iter().copied().find(|r| r.batch == b && r.variant == *v)).collect();
            let best = cells.iter().flatten().map(|r| r.mean_tokens_per_s).fold(f64::NEG_INFINITY, f64::max);
            let _ = write!(out, "| {b} |");
            for cell in cells {
                match cell {
                    None => out.push_str(" - |"),
                    Some(r) => {
                        let text = format!("{:.1} ± {:.1} ({:.3}x)", r.mean_tokens_per_s, r.std_tokens_per_s, r.speedup_vs_baseline);
                        if r.mean_tokens_per_s == best {
                            let _ = write!(out, " **{text}** |");
                        } else {
                            let _ = write!(out, " {text} |");
                        }
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
