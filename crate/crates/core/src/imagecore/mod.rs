//! Raster types shared by every stage, and their file formats.

mod colormap;
mod disparity;
mod io;
mod raster;

pub use colormap::viridis;
pub use disparity::DisparityMap;
pub use io::{
    load_disparity, load_image, quantize_image, read_pfm, render_disparity, render_rgb,
    save_disparity, save_image, write_pfm, BitDepth, DisparityFormat,
};
pub use raster::{ColorSpace, Image, MIN_SIDE};
