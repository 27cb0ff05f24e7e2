//! Write the random-dot benchmark to disk, load it back and re-verify every
//! scene's degradation.
//!
//!     cargo run --release --example make_bench [out_dir]

use asym_stereo::datasets::{load_manifest, make_random_dot_benchmark, BenchmarkConfig, LoadPolicy, MANIFEST_FILE};

fn main() -> asym_stereo::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| tmp.path().to_path_buf());
    let cfg = BenchmarkConfig { n_scenes: 4, ..Default::default() };
    let manifest = make_random_dot_benchmark(&cfg, &out)?;
    println!("{}", manifest.to_tsv());
    let (_, samples) = load_manifest(out.join(MANIFEST_FILE), LoadPolicy::FailFast)?;
    for s in &samples {
        s.verify_degradation()?;
        let gt = s.gt_disparity.as_ref().unwrap();
        println!("{}: {}x{}, max disparity {:.2}, degradation verified", s.scene_id, s.width(), s.height(), gt.max_valid().unwrap_or(0.0));
    }
    Ok(())
}
