use deepfusion::bench::{emit_report, parse_csv, run_sweep, BenchConfig, ReportFormat, ThroughputRow};
use deepfusion::swiglu::VariantTag;

fn small() -> BenchConfig {
    BenchConfig {
        d_model: 32,
        d_ff: 128,
        num_layers: 2,
        batch_sizes: vec![1, 4],
        decode_steps: vec![4],
        repetitions: 2,
        ..BenchConfig::default()
    }
}

fn numeric_part(rows: &[ThroughputRow]) -> Vec<(usize, usize, VariantTag, u64)> {
    rows.iter().map(|r| (r.batch, r.steps, r.variant, r.traffic_bytes_per_token.to_bits())).collect()
}

#[test]
fn non_timing_columns_are_reproducible() {
    let a = run_sweep(&small()).unwrap();
    let b = run_sweep(&small()).unwrap();
    assert_eq!(numeric_part(&a), numeric_part(&b));
}

#[test]
fn traffic_per_token_matches_the_model() {
    let rows = run_sweep(&small()).unwrap();
    for r in &rows {
        // Block traffic in elements, two bytes each, over two layers.
        let (b, d, f) = (r.batch as f64, 32.0, 128.0);
        let stage2 = b * f + f * d + b * d;
        let stage1 = match r.variant {
            VariantTag::FourKernel => 2.0 * b * d + 2.0 * d * f + 7.0 * b * f,
            VariantTag::TwoKernel => b * d + 2.0 * d * f + 5.0 * b * f,
            VariantTag::Fused => b * d + 2.0 * d * f + b * f,
        };
        let expected = 2.0 * 2.0 * (stage1 + stage2) / b;
        assert_eq!(r.traffic_bytes_per_token, expected, "{r:?}");
    }
}

#[test]
fn speedup_column_is_consistent() {
    let rows = run_sweep(&small()).unwrap();
    for r in &rows {
        let base = rows.iter().find(|b| b.batch == r.batch && b.steps == r.steps && b.variant == VariantTag::FourKernel).unwrap();
        let product = r.speedup_vs_baseline * base.mean_tokens_per_s;
        assert!((product - r.mean_tokens_per_s).abs() <= 1e-12 * r.mean_tokens_per_s);
        assert!(r.std_tokens_per_s >= 0.0);
    }
}

#[test]
fn baseline_is_timed_even_when_not_requested() {
    let rows = run_sweep(&BenchConfig { variants: vec![VariantTag::Fused], ..small() }).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.variant == VariantTag::Fused && r.speedup_vs_baseline > 0.0));
}

#[test]
fn csv_report_round_trips_sweep_output() {
    let rows = run_sweep(&small()).unwrap();
    let text = emit_report(&rows, ReportFormat::Csv).unwrap();
    assert_eq!(parse_csv(&text).unwrap(), rows);
    assert!(!text.contains(' '));
}

#[test]
fn throughput_is_roughly_flat_in_step_count() {
    let cfg = BenchConfig {
        d_model: 64,
        d_ff: 256,
        batch_sizes: vec![2],
        decode_steps: vec![8, 64],
        variants: vec![VariantTag::FourKernel],
        repetitions: 3,
        ..BenchConfig::default()
    };
    // Timing on a shared machine is noisy; accept the first of a few tries.
    let mut ratios = Vec::new();
    for _ in 0..3 {
        let rows = run_sweep(&cfg).unwrap();
        let ratio = rows[1].mean_tokens_per_s / rows[0].mean_tokens_per_s;
        if (0.75..=1.25).contains(&ratio) {
            return;
        }
        ratios.push(ratio);
    }
    panic!("steps=64 vs steps=8 throughput ratios {ratios:?}");
}
