//! Turn a folder of high-resolution stereo pairs into an asymmetric dataset
//! with randomly drawn anisotropic blur and JPEG compression.
//!
//!     cargo run --release --example simulate [src_dir out_dir]
//!
//! Without arguments a small source folder is rendered first.

use std::path::PathBuf;

use asym_stereo::datasets::{render_scene, simulate_dataset, SimulateOptions};
use asym_stereo::degradation::{DegradationMode, DegradationTemplate};
use asym_stereo::imagecore::{save_disparity, save_image, BitDepth, DisparityFormat};

fn main() -> asym_stereo::Result<()> {
    let tmp = tempfile::tempdir().expect("temp dir");
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (src, out) = match args.as_slice() {
        [s, o] => (PathBuf::from(s), PathBuf::from(o)),
        _ => {
            let src = tmp.path().join("src");
            for i in 0..3 {
                let dir = src.join(format!("pair{i}"));
                std::fs::create_dir_all(&dir).expect("create dir");
                let s = render_scene(192, 96, 24, i)?;
                save_image(&s.left, dir.join("left.png"), BitDepth::Eight)?;
                save_image(&s.right, dir.join("right.png"), BitDepth::Eight)?;
                save_disparity(&s.disparity, dir.join("disp.pfm"), DisparityFormat::Pfm)?;
            }
            (src, tmp.path().join("out"))
        }
    };
    let template = DegradationTemplate::new(4, DegradationMode::AgJpeg, 42);
    let manifest = simulate_dataset(&src, &template, &out, &SimulateOptions::default())?;
    print!("{}", manifest.to_tsv());
    Ok(())
}
