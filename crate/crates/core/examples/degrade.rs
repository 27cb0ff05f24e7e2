//! Degrade a rendered right view with every mode and compare the upsampled
//! result against the original.
//!
//!     cargo run --release --example degrade [out_dir]

use asym_stereo::datasets::render_scene;
use asym_stereo::degradation::{degrade, upsample_bicubic, DegradationMode, DegradationTemplate};
use asym_stereo::diagnostics::feature_psnr;
use asym_stereo::imagecore::{save_image, BitDepth};

fn main() -> asym_stereo::Result<()> {
    let out = std::env::args().nth(1);
    let scene = render_scene(256, 128, 32, 7)?;
    for mode in DegradationMode::ALL {
        let spec = DegradationTemplate::new(4, mode, 1).sample(0);
        let lr = degrade(&scene.right, &spec)?;
        let up = upsample_bicubic(&lr, spec.scale);
        let psnr = feature_psnr(&scene.right.to_tensor(), &up.to_tensor())?;
        println!("{mode:<8} lr {}x{}  kernel {:?}  jpeg {:?}  psnr(up, hr) {psnr:.2} dB", lr.width(), lr.height(), spec.kernel, spec.jpeg_quality);
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir).map_err(|e| asym_stereo::Error::Argument(e.to_string()))?;
            save_image(&up, format!("{dir}/right_up_{mode}.png"), BitDepth::Eight)?;
        }
    }
    Ok(())
}
