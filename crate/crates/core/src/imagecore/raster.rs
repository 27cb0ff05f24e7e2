use crate::error::{ensure_arg, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Gray,
    Rgb,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb => 3,
        }
    }

    pub fn from_channels(c: usize) -> Result<Self> {
        match c {
            1 => Ok(ColorSpace::Gray),
            3 => Ok(ColorSpace::Rgb),
            _ => Err(Error::Argument(format!("unsupported channel count {c}"))),
        }
    }
}

/// A raster with values in `[0, 1]`, stored planar (`[channel][row][column]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    color: ColorSpace,
    data: Vec<f64>,
}

/// Smallest side accepted by the loaders and by the losses (SSIM windows, kernels).
pub const MIN_SIDE: usize = 8;

impl Image {
    pub fn new(width: usize, height: usize, color: ColorSpace, data: Vec<f64>) -> Result<Self> {
        ensure_arg!(width > 0 && height > 0, "image must be non-empty");
        ensure_arg!(
            data.len() == width * height * color.channels(),
            "image data length {} does not match {}x{}x{}",
            data.len(),
            width,
            height,
            color.channels()
        );
        ensure_arg!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            "image values must lie in [0, 1]"
        );
        Ok(Image {
            width,
            height,
            color,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: ColorSpace, value: f64) -> Self {
        Image {
            width,
            height,
            color,
            data: vec![value.clamp(0.0, 1.0); width * height * color.channels()],
        }
    }

    /// Builds an image from `f(channel, y, x)`, clamping into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        color: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * color.channels());
        for c in 0..color.channels() {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            width,
            height,
            color,
            data,
        }
    }

    /// Planar `[C, H, W]` data clamped into `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        ensure_arg!(t.shape().len() == 3, "expected a [C, H, W] tensor");
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let color = ColorSpace::from_channels(c)?;
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::new(w, h, color, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels(), self.height, self.width], self.data.clone())
            .expect("image layout")
    }

    /// Luma with ITU-R BT.601 weights; grayscale images are returned unchanged.
    pub fn to_gray(&self) -> Image {
        match self.color {
            ColorSpace::Gray => self.clone(),
            ColorSpace::Rgb => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                let data = r
                    .iter()
                    .zip(g)
                    .zip(b)
                    .map(|((r, g), b)| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
                    .collect();
                Image {
                    width: self.width,
                    height: self.height,
                    color: ColorSpace::Gray,
                    data,
                }
            }
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        ensure_arg!(
            x0 + width <= self.width && y0 + height <= self.height && width > 0 && height > 0,
            "crop {}x{}+{}+{} outside {}x{} image",
            width,
            height,
            x0,
            y0,
            self.width,
            self.height
        );
        Ok(Image::from_fn(width, height, self.color, |c, y, x| {
            self.get(c, y + y0, x + x0)
        }))
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.color == other.color
    }
}
