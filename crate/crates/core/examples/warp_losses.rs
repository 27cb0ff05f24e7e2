//! Warp the right view with the true disparity and with a wrong one, and
//! print the photometric, smoothness and total losses for each.
//!
//!     cargo run --release --example warp_losses

use asym_stereo::datasets::{generate_random_dot_samples, BenchmarkConfig};
use asym_stereo::geometry::warp_right_to_left;
use asym_stereo::imagecore::DisparityMap;
use asym_stereo::losses::{photometric_loss, smoothness_loss, total_loss, LossConfig};

fn main() -> asym_stereo::Result<()> {
    let samples = generate_random_dot_samples(&BenchmarkConfig { n_scenes: 1, seed: 3, ..Default::default() })?;
    let s = &samples[0];
    let gt = s.gt_disparity.clone().expect("benchmark has ground truth");
    let cfg = LossConfig::default();
    let flat = DisparityMap::filled(gt.width(), gt.height(), 8.0);
    for (name, d) in [("ground truth", &gt), ("constant 8", &flat)] {
        for (view, right) in [("I_R ", s.right_hr.as_ref().unwrap()), ("I_r↑", &s.right_up)] {
            let warped = warp_right_to_left(right, d)?;
            let data = photometric_loss(&s.left, &warped, &cfg)?;
            let smooth = smoothness_loss(d, &s.left)?;
            println!("{name:<12} {view}  photometric {data:.4}  smooth {smooth:.4}  total {:.4}", total_loss(data, smooth, &cfg));
        }
    }
    let identity = warp_right_to_left(&s.left, &DisparityMap::filled(gt.width(), gt.height(), 0.0))?;
    println!("identity warp of the left view: {:.2e}", photometric_loss(&s.left, &identity, &cfg)?);
    Ok(())
}
