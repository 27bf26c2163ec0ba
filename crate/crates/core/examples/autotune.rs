//! Profiles the default candidate grid for one shape, prints the timings
//! and persists the choice. A second run reads it back from the cache.
//!
//! Usage: `cargo run --example autotune [cache-path]`

use deepfusion::autotune::{default_candidates, host_fingerprint, Autotuner};
use deepfusion::fused::KernelConfig;
use deepfusion::tensor::MlpShape;

fn main() -> deepfusion::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "autotune-example.toml".into());
    let shape = MlpShape::new(4, 256, 1024)?;
    let candidates = default_candidates(&shape);
    let refs: Vec<&KernelConfig> = candidates.iter().collect();
    let tuner = Autotuner::new(1, 4, 0, Some(path.clone().into()));

    let outcome = tuner.tune(&shape, &host_fingerprint(), &refs)?;
    if outcome.cache_hit {
        println!("cache hit in {path}: {}", outcome.entry.chosen);
        return Ok(());
    }
    let mut results = outcome.entry.all_results.clone();
    results.sort_by_key(|r| r.median_ns);
    for r in &results {
        println!("{:<28} median {:>9} ns", r.config_label, r.median_ns);
    }
    println!("chosen {} for {shape}; stored in {path}", outcome.entry.chosen);
    Ok(())
}
