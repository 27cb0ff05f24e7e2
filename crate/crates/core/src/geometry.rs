//! Horizontal warping of the right view into the left view.
//!
//! The differentiable form lives on the tape as [`Graph::warp`](crate::autodiff::Graph::warp);
//! the functions here are value-only conveniences built on the same op.

use crate::autodiff::Graph;
use crate::error::{ensure_arg, Result};
use crate::imagecore::{DisparityMap, Image};
use crate::network::FeatureMap;
use crate::tensor::Tensor;

/// Warped raster plus the mask of pixels whose source column was inside the image.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult<T> {
    pub warped: T,
    pub in_bounds: Vec<bool>,
}

/// Rasters that can be resampled along x.
pub trait Warpable: Sized {
    fn spatial_size(&self) -> (usize, usize);
    fn to_planar(&self) -> Tensor;
    fn with_planar(&self, t: Tensor) -> Result<Self>;
}

impl Warpable for Image {
    fn spatial_size(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn to_planar(&self) -> Tensor {
        self.to_tensor()
    }

    fn with_planar(&self, t: Tensor) -> Result<Self> {
        Image::from_tensor_clamped(&t)
    }
}

impl Warpable for FeatureMap {
    fn spatial_size(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn to_planar(&self) -> Tensor {
        self.tensor().clone()
    }

    fn with_planar(&self, t: Tensor) -> Result<Self> {
        FeatureMap::new(t, self.stride())
    }
}

/// `out[y, x] = bilinear sample of src at (y, x - d[y, x])`, clamped at the row ends.
/// Invalid disparities are treated as zero.
pub fn warp_right_to_left<T: Warpable>(src: &T, d: &DisparityMap) -> Result<WarpResult<T>> {
    let (w, h) = src.spatial_size();
    ensure_arg!(
        w == d.width() && h == d.height(),
        "warp: source is {}x{} but disparity is {}x{}",
        w,
        h,
        d.width(),
        d.height()
    );
    let (warped, in_bounds) = warp_tensor(&src.to_planar(), &d.to_tensor());
    Ok(WarpResult {
        warped: src.with_planar(warped)?,
        in_bounds,
    })
}

pub(crate) fn warp_tensor(src: &Tensor, disp: &Tensor) -> (Tensor, Vec<bool>) {
    let mut g = Graph::new();
    let s = g.constant(src.clone());
    let d = g.constant(disp.clone());
    let out = g.warp(s, d);
    let mask = g.warp_mask(out).expect("warp node").to_vec();
    (g.value(out).clone(), mask)
}

/// Downsamples a full-resolution mask by `stride`: a coarse pixel is set only
/// when every pixel of its block is set.
pub fn pool_mask(mask: &[bool], width: usize, height: usize, stride: usize) -> Vec<bool> {
    let (ow, oh) = (width / stride, height / stride);
    let mut out = vec![true; ow * oh];
    for (i, o) in out.iter_mut().enumerate() {
        let (oy, ox) = (i / ow, i % ow);
        *o = (0..stride).all(|dy| (0..stride).all(|dx| mask[(oy * stride + dy) * width + ox * stride + dx]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::ColorSpace;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, ColorSpace::Rgb, |_, _, _| rng.random())
    }

    #[test]
    fn zero_disparity_is_identity() {
        let img = random_image(13, 9, 1);
        let r = warp_right_to_left(&img, &DisparityMap::filled(13, 9, 0.0)).unwrap();
        assert_eq!(r.warped, img);
        assert!(r.in_bounds.iter().all(|v| *v));
    }

    #[test]
    fn unit_disparity_shifts_by_one_column() {
        let img = random_image(13, 9, 2);
        let r = warp_right_to_left(&img, &DisparityMap::filled(13, 9, 1.0)).unwrap();
        for c in 0..3 {
            for y in 0..9 {
                for x in 1..13 {
                    assert_eq!(r.warped.get(c, y, x), img.get(c, y, x - 1));
                }
                assert!(!r.in_bounds[y * 13]);
                assert_eq!(r.warped.get(c, y, 0), img.get(c, y, 0), "clamped to border");
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = random_image(13, 9, 2);
        assert!(warp_right_to_left(&img, &DisparityMap::filled(12, 9, 0.0)).is_err());
    }

    #[test]
    fn mask_pooling_requires_full_blocks() {
        let mut m = vec![true; 8 * 4];
        m[1] = false;
        let p = pool_mask(&m, 8, 4, 4);
        assert_eq!(p, vec![false, true]);
    }

    fn sum_warp_grad(src: &Tensor, disp: &Tensor) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let s = g.constant(src.clone());
        let d = g.param(disp.clone());
        let out = g.warp(s, d);
        let total = g.sum(out);
        g.backward(total);
        (g.value(total).item(), g.grad(d).unwrap().data().to_vec())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn disparity_gradient_matches_central_differences(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (12, 6);
            let src = Tensor::from_vec(&[2, h, w], (0..2 * h * w).map(|_| rng.random()).collect()).unwrap();
            let disp = Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
            let (_, grad) = sum_warp_grad(&src, &disp);
            let step = 1e-4;
            for i in 0..h * w {
                let d0 = disp.data()[i];
                // skip sampling knots and the left clamp boundary
                let frac = d0 - d0.floor();
                if !(0.01..=0.99).contains(&frac) || (i % w) as f64 - d0 < 0.01 {
                    continue;
                }
                let eval = |delta: f64| {
                    let mut dp = disp.clone();
                    dp.data_mut()[i] += delta;
                    sum_warp_grad(&src, &dp).0
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                let err = (grad[i] - fd).abs() / fd.abs().max(1e-3);
                prop_assert!(err < 1e-3, "pixel {}: analytic {} fd {}", i, grad[i], fd);
            }
        }

        #[test]
        fn warp_is_linear_and_bounded(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (10, 5);
            let mk = |rng: &mut ChaCha8Rng| Tensor::from_vec(&[1, h, w], (0..h * w).map(|_| rng.random()).collect()).unwrap();
            let (ta, tb) = (mk(&mut rng), mk(&mut rng));
            let disp = Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.random_range(0.0..6.0)).collect()).unwrap();
            let combo = Tensor::from_vec(&[1, h, w], ta.data().iter().zip(tb.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
            let (wa, mask) = warp_tensor(&ta, &disp);
            let (wb, _) = warp_tensor(&tb, &disp);
            let (wc, _) = warp_tensor(&combo, &disp);
            for i in 0..h * w {
                prop_assert!((wc.data()[i] - (a * wa.data()[i] + b * wb.data()[i])).abs() < 1e-10);
            }
            let (lo, hi) = ta.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(*v), u.max(*v)));
            for (i, v) in wa.data().iter().enumerate() {
                if mask[i] {
                    prop_assert!(*v >= lo - 1e-15 && *v <= hi + 1e-15);
                }
            }
        }
    }
}
