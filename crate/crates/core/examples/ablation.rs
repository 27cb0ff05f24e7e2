//! The four input/loss settings: asymmetric or symmetric input, asymmetric or
//! symmetric reconstruction loss. Each is trained for one stage and evaluated
//! on its own input pair.
//!
//!     cargo run --release --example ablation [epochs]

use asym_stereo::datasets::{generate_random_dot_samples, BenchmarkConfig, Split};
use asym_stereo::network::{NetworkConfig, NetworkParams};
use asym_stereo::trainer::{configure_ablation, evaluate_samples, train_stage, Setting, TrainConfig};

fn main() -> asym_stereo::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let train = generate_random_dot_samples(&BenchmarkConfig { n_scenes: 20, seed: 1000, ..Default::default() })?;
    let test = generate_random_dot_samples(&BenchmarkConfig { n_scenes: 5, seed: 5000, split: Split::Test, ..Default::default() })?;
    let init = NetworkParams::init(&NetworkConfig { norm_groups: 4, ..Default::default() }.covering(32))?;
    println!("setting\tinput_is_hr\tloss_is_hr\ttest_3pe\ttest_epe");
    for setting in [Setting::S1, Setting::S2, Setting::S3, Setting::S4] {
        let pair = configure_ablation(setting, &train[0])?;
        let hr = train[0].right_hr.as_ref().unwrap();
        let cfg = TrainConfig { epochs_per_stage: epochs, crop_width: 128, crop_height: 64, setting, ..Default::default() };
        let state = train_stage(&init, None, &train, &[], &cfg, 0)?;
        let rows = evaluate_samples(&state.params, &test, setting)?;
        let n = rows.len() as f64;
        println!(
            "{setting}\t{}\t{}\t{:.2}\t{:.3}",
            std::ptr::eq(pair.input.1, hr),
            std::ptr::eq(pair.loss.1, hr),
            rows.iter().map(|r| r.1).sum::<f64>() / n,
            rows.iter().map(|r| r.2).sum::<f64>() / n
        );
    }
    Ok(())
}
