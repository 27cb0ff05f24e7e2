//! Save and reload a checkpoint, predict a disparity map with it and write
//! colour-mapped PNGs of the prediction and the ground truth.
//!
//!     cargo run --release --example checkpoint_render [out_dir]

use asym_stereo::datasets::{generate_random_dot_samples, BenchmarkConfig};
use asym_stereo::imagecore::{load_disparity, render_disparity, save_disparity, DisparityFormat};
use asym_stereo::network::{forward, load_checkpoint, save_checkpoint, NetworkConfig, NetworkParams};

fn main() -> asym_stereo::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&out).expect("create out dir");
    let params = NetworkParams::init(&NetworkConfig { d_max: 32, init_seed: 5, ..Default::default() })?;
    let ckpt = out.join("init.ckpt");
    save_checkpoint(&params, &ckpt)?;
    let back = load_checkpoint(&ckpt)?;
    assert_eq!(back, params, "checkpoint round trip");

    let s = &generate_random_dot_samples(&BenchmarkConfig { n_scenes: 1, ..Default::default() })?[0];
    let pred = forward(&s.left, &s.right_up, &back)?.disparity;
    save_disparity(&pred, out.join("pred.pfm"), DisparityFormat::Pfm)?;
    assert_eq!(load_disparity(out.join("pred.pfm"), DisparityFormat::Pfm)?, pred, "PFM round trip");
    render_disparity(&pred, out.join("pred.png"), 32.0)?;
    render_disparity(s.gt_disparity.as_ref().unwrap(), out.join("gt.png"), 32.0)?;
    println!("wrote {} parameters and renders to {}", back.num_scalars(), out.display());
    Ok(())
}
