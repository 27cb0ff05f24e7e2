use crate::error::{ensure_arg, Result};
use crate::tensor::Tensor;

/// Per-pixel horizontal offsets for the left view plus a validity mask.
///
/// A positive value `d` at `(y, x)` means the left pixel corresponds to right
/// pixel `(y, x - d)`. Invalid pixels always store `0.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
    valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        ensure_arg!(n > 0, "disparity map must be non-empty");
        ensure_arg!(
            data.len() == n && valid.len() == n,
            "disparity buffers do not match {}x{}",
            width,
            height
        );
        ensure_arg!(
            data.iter().zip(&valid).all(|(d, v)| !v || d.is_finite()),
            "valid disparities must be finite"
        );
        let data = data
            .into_iter()
            .zip(&valid)
            .map(|(d, &v)| if v { d } else { 0.0 })
            .collect();
        Ok(DisparityMap {
            width,
            height,
            data,
            valid,
        })
    }

    /// All-valid map.
    pub fn from_values(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let valid = vec![true; data.len()];
        Self::new(width, height, data, valid)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        DisparityMap {
            width,
            height,
            data: vec![value; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f32>) -> Self {
        let mut data = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(y, x).filter(|v| v.is_finite()) {
                    Some(v) => {
                        data.push(v);
                        valid.push(true);
                    }
                    None => {
                        data.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        DisparityMap {
            width,
            height,
            data,
            valid,
        }
    }

    /// Converts an `[H, W]` (or `[1, H, W]`) tensor into an all-valid map.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (p, h, w) = t.planes();
        ensure_arg!(p == 1, "disparity tensor must have a single plane");
        let data = t.data().iter().map(|&v| v as f32).collect();
        Self::from_values(w, h, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Option<f32> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.data[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn max_valid(&self) -> Option<f32> {
        self.data
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(d, _)| *d)
            .reduce(f32::max)
    }

    /// `[H, W]` tensor with invalid pixels set to zero.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("disparity layout")
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        ensure_arg!(
            x0 + width <= self.width && y0 + height <= self.height && width > 0 && height > 0,
            "crop outside disparity map"
        );
        Ok(DisparityMap::from_fn(width, height, |y, x| self.get(y + y0, x + x0)))
    }

    /// Nearest-neighbour upsampling by `factor` with values multiplied by `factor`,
    /// turning a disparity measured on a coarse grid into full-resolution pixels.
    pub fn upsample_nearest_scaled(&self, factor: usize) -> Self {
        let f = factor as f32;
        DisparityMap::from_fn(self.width * factor, self.height * factor, |y, x| {
            self.get(y / factor, x / factor).map(|d| d * f)
        })
    }

    pub fn same_shape(&self, other: &DisparityMap) -> bool {
        self.width == other.width && self.height == other.height
    }
}
