//! A small decode-throughput sweep printed as markdown.

use deepfusion::bench::{emit_report, run_sweep, BenchConfig, ReportFormat};

fn main() -> deepfusion::Result<()> {
    let cfg = BenchConfig {
        d_model: 256,
        d_ff: 1024,
        num_layers: 2,
        batch_sizes: vec![1, 8, 32],
        decode_steps: vec![4, 16],
        repetitions: 3,
        ..BenchConfig::default()
    };
    let rows = run_sweep(&cfg)?;
    print!("{}", emit_report(&rows, ReportFormat::Markdown)?);
    Ok(())
}
