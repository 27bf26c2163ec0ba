//! Profile-driven kernel selection.
//!
//! Before inference the scheduler times every candidate on seeded random
//! data of the target shape, drops candidates whose output disagrees with
//! the four-kernel reference, picks the lowest median, and persists the
//! decision keyed by `(shape, fingerprint)`.

use std::cmp::Reverse;
use std::fs::{self, File, OpenOptions};
use std::hint::black_box;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::executor;
use crate::fused::{KernelConfig, LoopOrder, TileConfig};
use crate::swiglu::{four_kernel_stage1, Accounting, MlpWeights, VariantTag};
use crate::tensor::{Matrix, MlpShape};

/// Maximum per-element deviation from the reference before a candidate is
/// disqualified.
pub const CORRECTNESS_TOLERANCE: f64 = 1e-10;

pub const CACHE_FORMAT_VERSION: u32 = 1;

/// Something the profiler can time: a labelled stage-1 implementation.
pub trait Stage1Kernel: Send + Sync {
    fn config(&self) -> &KernelConfig;
    fn run(&self, x: &Matrix, w: &MlpWeights) -> Result<Matrix>;
}

impl Stage1Kernel for KernelConfig {
    fn config(&self) -> &KernelConfig {
        self
    }

    fn run(&self, x: &Matrix, w: &MlpWeights) -> Result<Matrix> {
        executor::run_stage1(self, x, w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub config_label: String,
    pub variant: VariantTag,
    pub samples_ns: Vec<u64>,
    /// Lower median of `samples_ns`.
    pub median_ns: u64,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    /// Set when the candidate failed or produced a wrong result; such
    /// results carry no samples and are never selected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disqualified: Option<String>,
}

impl BenchmarkResult {
    pub fn from_samples(config_label: &str, variant: VariantTag, samples_ns: Vec<u64>, warmup_runs: usize) -> Self {
        Self {
            config_label: config_label.to_owned(),
            variant,
            median_ns: lower_median(&samples_ns),
            measured_runs: samples_ns.len(),
            samples_ns,
            warmup_runs,
            disqualified: None,
        }
    }

    pub fn is_qualified(&self) -> bool {
        self.disqualified.is_none()
    }
}

pub fn lower_median(samples: &[u64]) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    s[(s.len() - 1) / 2]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub shape: MlpShape,
    pub fingerprint: String,
    /// Label of the selected candidate.
    pub chosen: String,
    pub all_results: Vec<BenchmarkResult>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl ScheduleEntry {
    pub fn chosen_config(&self) -> Result<KernelConfig> {
        KernelConfig::from_label(&self.chosen)
    }
}

/// FourKernel, TwoKernel and a fused tile grid
/// `tile_m ∈ {1, B} × tile_n ∈ {32, 128, d_ff} × tile_k ∈ {32, d_model}`
/// over both loop orders, clamped to the shape and deduplicated.
pub fn default_candidates(shape: &MlpShape) -> Vec<KernelConfig> {
    let mut out = vec![KernelConfig::four_kernel(), KernelConfig::two_kernel()];
    for order in [LoopOrder::RowMajorTiling, LoopOrder::ColumnMajorTiling] {
        for m in [1, shape.batch] {
            for n in [32, 128, shape.d_ff] {
                for k in [32, shape.d_model] {
                    let tile = TileConfig { tile_m: m, tile_n: n, tile_k: k, loop_order: order }.clamped(shape);
                    let c = KernelConfig::fused(tile);
                    if !out.contains(&c) {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

fn elapsed_ns(start: Instant) -> u64 {
    u64::try_from(start.elapsed().as_nanos()).unwrap_or(u64::MAX)
}

/// Times each candidate: `warmup` unmeasured runs, then `runs` measured
/// runs, all on the same seeded inputs. The first warmup output is checked
/// against the four-kernel reference.
pub fn profile<K: Stage1Kernel + ?Sized>(
    candidates: &[&K],
    shape: &MlpShape,
    warmup: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<BenchmarkResult>> {
    if warmup < 1 {
        return Err(Error::Config("profiling needs at least one warmup run".into()));
    }
    if runs < 3 {
        return Err(Error::Config(format!("profiling needs at least 3 measured runs, got {runs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = MlpWeights::random(shape.d_model, shape.d_ff, 1.0, &mut rng)?;
    let x = Matrix::random(shape.batch, shape.d_model, 1.0, &mut rng)?;
    let reference = four_kernel_stage1(&x, &w, Accounting::Ideal)?;

    let mut results = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let cfg = cand.config();
        let disqualify = |reason: String| BenchmarkResult {
            config_label: cfg.label.clone(),
            variant: cfg.variant,
            samples_ns: Vec::new(),
            median_ns: 0,
            warmup_runs: 0,
            measured_runs: 0,
            disqualified: Some(reason),
        };
        let check = match cand.run(&x, &w) {
            Err(e) => Err(format!("execution failed: {e}")),
            Ok(out) if out.dims() != reference.dims() => {
                Err(format!("output is {}x{}, expected {}x{}", out.rows(), out.cols(), reference.rows(), reference.cols()))
            }
            Ok(out) => {
                let dev = out.max_abs_diff(&reference);
                // NaN deviations must disqualify too.
                if dev <= CORRECTNESS_TOLERANCE {
                    Ok(())
                } else {
                    Err(format!("max deviation {dev:e} from reference exceeds {CORRECTNESS_TOLERANCE:e}"))
                }
            }
        };
        if let Err(reason) = check {
            results.push(disqualify(reason));
            continue;
        }
        for _ in 1..warmup {
            black_box(cand.run(black_box(&x), &w)?);
        }
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            black_box(cand.run(black_box(&x), &w)?);
            samples.push(elapsed_ns(start));
        }
        results.push(BenchmarkResult::from_samples(&cfg.label, cfg.variant, samples, warmup));
    }
    Ok(results)
}

/// Qualified result with the lowest median; ties go to deeper fusion, then
/// the lexicographically smaller label.
pub fn select_best(results: &[BenchmarkResult]) -> Result<&BenchmarkResult> {
    results
        .iter()
        .filter(|r| r.is_qualified())
        .min_by_key(|r| (r.median_ns, Reverse(r.variant.fusion_depth()), r.config_label.as_str()))
        .ok_or(Error::AllDisqualified { disqualified: results.len() })
}

pub fn select(results: &[BenchmarkResult], shape: &MlpShape, fingerprint: &str) -> Result<ScheduleEntry> {
    let best = select_best(results)?;
    Ok(ScheduleEntry {
        shape: *shape,
        fingerprint: fingerprint.to_owned(),
        chosen: best.config_label.clone(),
        all_results: results.to_vec(),
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    /// SHA-256 over the TOML encoding of `entry`.
    digest: String,
    entry: ScheduleEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheFile {
    format_version: u32,
    entry_count: usize,
    #[serde(default)]
    entries: Vec<CacheRecord>,
}

fn entry_digest(entry: &ScheduleEntry) -> Result<String> {
    let text = toml::to_string(entry).map_err(|e| Error::Config(format!("cannot encode schedule entry: {e}")))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn parse_error(path: &Path, message: impl Into<String>) -> Error {
    Error::CacheParse { path: path.to_owned(), message: message.into() }
}

fn read_cache(path: &Path) -> Result<Vec<ScheduleEntry>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let table: toml::Table = toml::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    let version = table
        .get("format_version")
        .and_then(toml::Value::as_integer)
        .ok_or_else(|| parse_error(path, "missing integer field `format_version`"))?;
    if version != i64::from(CACHE_FORMAT_VERSION) {
        return Err(Error::CacheVersion {
            path: path.to_owned(),
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: CACHE_FORMAT_VERSION,
        });
    }
    let file: CacheFile = toml::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    if file.entries.len() != file.entry_count {
        return Err(parse_error(path, format!("field `entry_count` says {} entries, found {}", file.entry_count, file.entries.len())));
    }
    let mut entries = Vec::with_capacity(file.entries.len());
    for (i, rec) in file.entries.into_iter().enumerate() {
        if entry_digest(&rec.entry)? != rec.digest {
            return Err(parse_error(path, format!("entry {i}: field `digest` does not match its contents")));
        }
        entries.push(rec.entry);
    }
    Ok(entries)
}

fn write_cache(path: &Path, entries: Vec<ScheduleEntry>) -> Result<()> {
    let records = entries.into_iter().map(|entry| Ok(CacheRecord { digest: entry_digest(&entry)?, entry })).collect::<Result<Vec<_>>>()?;
    let file = CacheFile { format_version: CACHE_FORMAT_VERSION, entry_count: records.len(), entries: records };
    let text = toml::to_string(&file).map_err(|e| Error::Config(format!("cannot encode tuning cache: {e}")))?;
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".lock");
    path.with_file_name(name)
}

/// Inserts or replaces the entry for `(entry.shape, entry.fingerprint)`.
///
/// Writers serialize on an exclusive lock file; the cache itself is
/// replaced by rename, so concurrent readers see either the old or the new
/// file.
pub fn cache_store(entry: &ScheduleEntry, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let lock = OpenOptions::new().create(true).truncate(false).write(true).open(lock_path(path))?;
    lock.lock()?;
    let mut entries = read_cache(path)?;
    entries.retain(|e| !(e.shape == entry.shape && e.fingerprint == entry.fingerprint));
    entries.push(entry.clone());
    let res = write_cache(path, entries);
    lock.unlock()?;
    res
}

/// `Ok(None)` on a miss or a missing file; errors only for unreadable,
/// corrupt or newer-version files.
pub fn cache_lookup(shape: &MlpShape, fingerprint: &str, path: &Path) -> Result<Option<ScheduleEntry>> {
    Ok(read_cache(path)?.into_iter().find(|e| e.shape == *shape && e.fingerprint == fingerprint))
}

/// Free-text descriptor of the current host: architecture, OS, CPU model
/// and logical core count.
pub fn host_fingerprint() -> String {
    let cpu = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_owned()))
        .unwrap_or_else(|| "unknown-cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} {} x{}", std::env::consts::ARCH, std::env::consts::OS, cpu, cores)
}

/// Cache key text for tuning `variants` on this host. Different candidate
/// sets get different keys so a subset tuning never answers for a superset.
pub fn candidate_set_fingerprint(variants: &[VariantTag]) -> String {
    let mut v = variants.to_vec();
    v.sort();
    v.dedup();
    let names: Vec<&str> = v.iter().map(|t| t.as_str()).collect();
    format!("{}|{}", host_fingerprint(), names.join(","))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TuneOutcome {
    pub entry: ScheduleEntry,
    pub cache_hit: bool,
}

/// Profile-then-select with an optional on-disk cache in front.
#[derive(Debug)]
pub struct Autotuner {
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
    pub cache_path: Option<PathBuf>,
    profile_calls: AtomicUsize,
}

impl Autotuner {
    pub fn new(warmup: usize, runs: usize, seed: u64, cache_path: Option<PathBuf>) -> Self {
        Self { warmup, runs, seed, cache_path, profile_calls: AtomicUsize::new(0) }
    }

    /// Number of times [`profile`] has run through this tuner.
    pub fn profile_invocations(&self) -> usize {
        self.profile_calls.load(Ordering::Relaxed)
    }

    pub fn tune<K: Stage1Kernel + ?Sized>(&self, shape: &MlpShape, fingerprint: &str, candidates: &[&K]) -> Result<TuneOutcome> {
        if let Some(path) = &self.cache_path {
            if let Some(entry) = cache_lookup(shape, fingerprint, path)? {
                return Ok(TuneOutcome { entry, cache_hit: true });
            }
        }
        self.profile_calls.fetch_add(1, Ordering::Relaxed);
        let results = profile(candidates, shape, self.warmup, self.runs, self.seed)?;
        let entry = select(&results, shape, fingerprint)?;
        if let Some(path) = &self.cache_path {
            cache_store(&entry, path)?;
        }
        Ok(TuneOutcome { entry, cache_hit: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(label: &str, variant: VariantTag, samples: &[u64]) -> BenchmarkResult {
        BenchmarkResult::from_samples(label, variant, samples.to_vec(), 1)
    }

    #[test]
    fn lower_median_picks_lower_middle() {
        assert_eq!(lower_median(&[5, 1, 3]), 3);
        assert_eq!(lower_median(&[4, 1, 3, 2]), 2);
        assert_eq!(lower_median(&[7]), 7);
    }

    #[test]
    fn candidate_grid_sizes() {
        let tiny = default_candidates(&MlpShape::new(1, 4, 8).unwrap());
        for v in VariantTag::ALL {
            assert!(tiny.iter().any(|c| c.variant == v));
        }
        assert_eq!(tiny.len(), 4);

        let big = default_candidates(&MlpShape::new(16, 1024, 4096).unwrap());
        assert_eq!(big.len(), 2 + 2 * 2 * 3 * 2);
        let mut labels: Vec<_> = big.iter().map(|c| c.label.clone()).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), big.len());
    }

    #[test]
    fn select_examples() {
        let shape = MlpShape::new(1, 4, 8).unwrap();
        let one = [result("two_kernel", VariantTag::TwoKernel, &[5, 6, 7])];
        assert_eq!(select(&one, &shape, "h").unwrap().chosen, "two_kernel");

        let tie = [result("two_kernel", VariantTag::TwoKernel, &[5, 6, 7]), result("fused_row_m1_n8_k4", VariantTag::Fused, &[6, 5, 9])];
        assert_eq!(select(&tie, &shape, "h").unwrap().chosen, "fused_row_m1_n8_k4");

        let same_variant =
            [result("fused_row_m1_n8_k4", VariantTag::Fused, &[5, 5, 5]), result("fused_col_m1_n8_k4", VariantTag::Fused, &[5, 5, 5])];
        assert_eq!(select(&same_variant, &shape, "h").unwrap().chosen, "fused_col_m1_n8_k4");
    }

    #[test]
    fn all_disqualified_is_an_error() {
        let mut r = result("fused_row_m1_n8_k4", VariantTag::Fused, &[1, 1, 1]);
        r.disqualified = Some("wrong".into());
        let shape = MlpShape::new(1, 4, 8).unwrap();
        assert!(matches!(select(&[r], &shape, "h"), Err(Error::AllDisqualified { disqualified: 1 })));
    }

    #[test]
    fn profile_rejects_bad_run_counts() {
        let shape = MlpShape::new(1, 4, 8).unwrap();
        let c = KernelConfig::two_kernel();
        assert!(profile(&[&c], &shape, 0, 4, 1).is_err());
        assert!(profile(&[&c], &shape, 1, 2, 1).is_err());
    }

    #[test]
    fn profile_records_runs() {
        let shape = MlpShape::new(2, 8, 16).unwrap();
        let cands = default_candidates(&shape);
        let refs: Vec<&KernelConfig> = cands.iter().collect();
        let results = profile(&refs, &shape, 1, 4, 7).unwrap();
        assert_eq!(results.len(), cands.len());
        for r in &results {
            assert!(r.is_qualified(), "{:?}", r.disqualified);
            assert_eq!(r.samples_ns.len(), 4);
            assert_eq!(r.measured_runs, 4);
            assert_eq!(r.median_ns, lower_median(&r.samples_ns));
        }
    }
}
