use std::path::Path;
use std::process::{Command, Output};

use deepfusion::bench::parse_csv;
use deepfusion::cli::cli_entry;
use deepfusion::swiglu::VariantTag;

const SMALL: [&str; 8] = ["--d-model", "32", "--d-ff", "128", "--layers", "2", "--reps", "2"];

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepfusion")).args(args).current_dir(cwd).env_remove("DEEPFUSION_CACHE").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(cli_entry(["deepfusion", "--help"]), 0);
    assert_eq!(cli_entry(["deepfusion", "bench", "--help"]), 0);
    assert_eq!(cli_entry(["deepfusion"]), 2);
    assert_eq!(cli_entry(["deepfusion", "bench", "--no-such-flag"]), 2);
    assert_eq!(cli_entry(["deepfusion", "frobnicate"]), 2);
    assert_eq!(cli_entry(["deepfusion", "bench", "--variants", "three_kernel"]), 2);
    assert_eq!(cli_entry(["deepfusion", "bench", "--format", "xml"]), 2);
    assert_eq!(cli_entry(["deepfusion", "bench", "--reps", "1"]), 2);
    assert_eq!(cli_entry(["deepfusion", "bench", "--d-model", "0"]), 2);
}

#[test]
fn unknown_flag_prints_help_hint() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["traffic", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--bogus") && err.contains("Usage"), "{err}");
}

#[test]
fn bench_csv_has_one_row_per_batch_and_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[&["bench", "--batch", "1,2", "--steps", "8", "--format", "csv"][..], &SMALL].concat(), dir.path());
    assert!(o.status.success());
    let rows = parse_csv(&stdout(&o)).unwrap();
    assert_eq!(rows.len(), 2 * VariantTag::ALL.len());
    assert!(rows.iter().all(|r| r.steps == 8));
}

#[test]
fn bench_variant_subset_and_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let o = run(
        &[&["bench", "--batch", "3", "--steps", "2", "--variants", "fused,two_kernel", "--out"][..], &[out.to_str().unwrap()], &SMALL]
            .concat(),
        dir.path(),
    );
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let rows = parse_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let variants: Vec<_> = rows.iter().map(|r| r.variant).collect();
    assert_eq!(variants, [VariantTag::Fused, VariantTag::TwoKernel]);
}

#[test]
fn tune_twice_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("tune.toml");
    let args = ["tune", "--batch", "2", "--d-model", "16", "--d-ff", "64"];
    let first = Command::new(env!("CARGO_BIN_EXE_deepfusion")).args(args).env("DEEPFUSION_CACHE", &cache).output().unwrap();
    assert!(first.status.success());
    assert!(stdout(&first).contains("profiled"), "{}", stdout(&first));
    let second =
        Command::new(env!("CARGO_BIN_EXE_deepfusion")).args(args).args(["--cache-path", cache.to_str().unwrap()]).output().unwrap();
    assert!(second.status.success());
    let text = stdout(&second);
    assert!(text.contains("cache hit") && text.contains("profiling skipped"), "{text}");
}

#[test]
fn tune_rejects_future_cache_versions() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("tune.toml");
    std::fs::write(&cache, "format_version = 9\nentry_count = 0\n").unwrap();
    let o = run(&["tune", "--batch", "1", "--d-model", "8", "--d-ff", "16", "--cache-path", cache.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 9"));
}

#[test]
fn traffic_table_orders_variants() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["traffic", "--batch", "1,8"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    for chunk in rows.chunks(3) {
        let stage1: Vec<u64> = chunk.iter().map(|r| r[4].parse().unwrap()).collect();
        assert!(stage1[2] < stage1[1] && stage1[1] < stage1[0], "{stage1:?}");
    }
}

#[test]
fn tp_check_reports_single_all_reduce() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["tp-check", "--batch", "2", "--d-model", "24", "--d-ff", "40"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.matches("PASS").count(), 15, "{text}");
    assert!(text.contains("3 all-gather(s)"));
    let o = run(&["tp-check", "--tp", "3", "--d-model", "24", "--d-ff", "40"], dir.path());
    assert_eq!(stdout(&o).matches("PASS").count(), 3);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let clean = run(&["verify", "--skip-timing"], dir.path());
    assert_eq!(clean.status.code(), Some(0), "{}", stdout(&clean));
    assert!(stdout(&clean).contains("all invariants hold"));
    let chunk = run(&["verify", "--skip-timing", "--mutant", "silu-per-chunk"], dir.path());
    assert_eq!(chunk.status.code(), Some(1));
    assert!(stdout(&chunk).contains("FAIL tiling_invariance"));
    let spill = run(&["verify", "--skip-timing", "--mutant", "spill-gate"], dir.path());
    assert_eq!(spill.status.code(), Some(1));
    assert!(stdout(&spill).contains("FAIL traffic_exactness"));
}

#[test]
fn mutant_flag_is_hidden_from_help() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--help"], dir.path());
    assert!(o.status.success());
    let help = stdout(&o);
    assert!(help.contains("--skip-timing"));
    assert!(!help.contains("--mutant"));
}
