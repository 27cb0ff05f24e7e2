//! 3PE and EPE of a few hand-made predictions against benchmark ground truth.
//!
//!     cargo run --release --example metrics

use asym_stereo::datasets::render_scene;
use asym_stereo::imagecore::DisparityMap;
use asym_stereo::metrics::{end_point_error, three_pixel_error};

fn main() -> asym_stereo::Result<()> {
    let gt = render_scene(256, 128, 32, 11)?.disparity;
    let (w, h) = (gt.width(), gt.height());
    let shifted = |delta: f32| DisparityMap::from_fn(w, h, |y, x| gt.get(y, x).map(|d| d + delta));
    let preds = [
        ("exact", gt.clone()),
        ("+2 px", shifted(2.0)),
        ("+4 px", shifted(4.0)),
        ("zero", DisparityMap::filled(w, h, 0.0)),
    ];
    println!("prediction\t3pe_percent\tepe_px");
    for (name, p) in &preds {
        println!("{name}\t{:.3}\t{:.3}", three_pixel_error(p, &gt)?, end_point_error(p, &gt)?);
    }
    Ok(())
}
