//! Self-boosting on the random-dot benchmark: stage 0 with the photometric
//! loss, then stages trained with the feature-metric loss of the previous
//! stage's frozen extractor.
//!
//!     cargo run --release --example self_boost [epochs_per_stage] [out_dir]
//!
//! The acceptance runs use 30 epochs per stage; the default here is short.

use asym_stereo::datasets::{generate_random_dot_samples, BenchmarkConfig, Split};
use asym_stereo::network::NetworkConfig;
use asym_stereo::trainer::{evaluate_samples, self_boost, Setting, TrainConfig};

fn main() -> asym_stereo::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|a| a.parse().ok()).unwrap_or(4);
    let out = args.get(1).map(std::path::PathBuf::from);
    let train = generate_random_dot_samples(&BenchmarkConfig { n_scenes: 20, seed: 1000, ..Default::default() })?;
    let test = generate_random_dot_samples(&BenchmarkConfig { n_scenes: 5, seed: 5000, split: Split::Test, ..Default::default() })?;
    let net = NetworkConfig { norm_groups: 4, ..Default::default() }.covering(32);
    let cfg = TrainConfig { epochs_per_stage: epochs, stages: 2, crop_width: 128, crop_height: 64, ..Default::default() };
    let states = self_boost(&net, &train, &test, &cfg, out.as_deref())?;
    println!("stage\tfinal_loss\ttest_3pe\ttest_epe");
    for s in &states {
        let rows = evaluate_samples(&s.params, &test, Setting::S1)?;
        let n = rows.len() as f64;
        let loss = s.history.last().map_or(f64::NAN, |r| r.train_loss);
        println!("{}\t{loss:.4}\t{:.2}\t{:.3}", s.k, rows.iter().map(|r| r.1).sum::<f64>() / n, rows.iter().map(|r| r.2).sum::<f64>() / n);
    }
    Ok(())
}
