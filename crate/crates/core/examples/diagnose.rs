//! Feature-space diagnostics: PSNR between features of the sharp and the
//! degraded right view, and winner-takes-all matching accuracy, for the raw
//! image space and for an extractor before and after training.
//!
//!     cargo run --release --example diagnose [epochs]

use asym_stereo::datasets::{generate_random_dot_samples, BenchmarkConfig, Split};
use asym_stereo::diagnostics::{evaluate_space_over, FeatureSpace, SpaceReport};
use asym_stereo::network::{NetworkConfig, NetworkParams};
use asym_stereo::trainer::{train_stage, TrainConfig};

fn main() -> asym_stereo::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let train = generate_random_dot_samples(&BenchmarkConfig { n_scenes: 20, seed: 1000, ..Default::default() })?;
    let test = generate_random_dot_samples(&BenchmarkConfig { n_scenes: 5, seed: 5000, split: Split::Test, ..Default::default() })?;
    let net = NetworkConfig { norm_groups: 4, ..Default::default() }.covering(32);
    let init = NetworkParams::init(&net)?;
    let cfg = TrainConfig { epochs_per_stage: epochs, crop_width: 128, crop_height: 64, ..Default::default() };
    let trained = train_stage(&init, None, &train, &[], &cfg, 0)?.params;
    println!("{}", SpaceReport::TSV_HEADER);
    let spaces = [
        FeatureSpace::Image,
        FeatureSpace::Network { label: "phi_init".into(), config: &net, extractor: &init.extractor },
        FeatureSpace::Network { label: format!("phi_{epochs}ep"), config: &net, extractor: &trained.extractor },
    ];
    for space in &spaces {
        let (_, mean) = evaluate_space_over(space, &test, 32)?;
        println!("{mean}");
    }
    Ok(())
}
