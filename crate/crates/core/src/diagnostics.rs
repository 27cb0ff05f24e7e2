//! Feature-space diagnostics: how degradation-agnostic a representation is
//! (PSNR between features of the high-resolution and the upsampled right
//! view) and how matching-specific it is (winner-takes-all 3PE against the
//! left view).

use std::fmt;

use crate::datasets::StereoSample;
use crate::error::{ensure_arg, Result};
use crate::imagecore::{DisparityMap, Image};
use crate::metrics::three_pixel_error;
use crate::network::{extract_features_with, FeatureMap, NetworkConfig, ParamSet};
use crate::tensor::Tensor;

/// PSNR after jointly min-max normalising both maps to `[0, 1]`.
/// Identical inputs give `f64::INFINITY`.
pub fn feature_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_arg!(a.shape() == b.shape(), "feature_psnr: shapes differ");
    ensure_arg!(!a.is_empty(), "feature_psnr: empty input");
    let (lo, hi) = a
        .data()
        .iter()
        .chain(b.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let range = hi - lo;
    if range == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) / range).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Winner-takes-all on Euclidean feature distance over hypotheses `0..levels`.
/// Hypotheses reaching left of column 0 are skipped; ties go to the smaller
/// disparity. Output is on the feature grid, in feature pixels.
pub fn wta_match(left: &FeatureMap, right: &FeatureMap, levels: usize) -> Result<DisparityMap> {
    ensure_arg!(left.tensor().shape() == right.tensor().shape(), "wta_match: shapes differ");
    ensure_arg!(levels >= 1, "wta_match: need at least one hypothesis");
    let (c, h, w) = (left.channels(), left.height(), left.width());
    let (l, r) = (left.tensor().data(), right.tensor().data());
    let plane = h * w;
    Ok(DisparityMap::from_fn(w, h, |y, x| {
        let mut best = (f64::INFINITY, 0usize);
        for d in 0..levels.min(x + 1) {
            let mut dist = 0.0;
            for ch in 0..c {
                let e = l[ch * plane + y * w + x] - r[ch * plane + y * w + x - d];
                dist += e * e;
            }
            if dist < best.0 {
                best = (dist, d);
            }
        }
        Some(best.1 as f32)
    }))
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Winner-takes-all over the sum of squared differences of `patch x patch`
/// windows (reflect padded), hypotheses `0..d_max`, ties to the smaller disparity.
pub fn patch_match_image(left: &Image, right: &Image, patch: usize, d_max: usize) -> Result<DisparityMap> {
    ensure_arg!(left.same_shape(right), "patch_match_image: shapes differ");
    ensure_arg!(patch % 2 == 1, "patch size must be odd");
    ensure_arg!(d_max >= 1, "patch_match_image: need at least one hypothesis");
    let (w, h, c) = (left.width(), left.height(), left.channels());
    let r = (patch / 2) as isize;
    ensure_arg!(w > r as usize && h > r as usize, "patch larger than image");
    // pad once so window reads are plain indexing
    let (pw, ph) = (w + 2 * r as usize, h + 2 * r as usize);
    let pad = |img: &Image| -> Vec<f64> {
        let mut out = vec![0.0; c * pw * ph];
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    let sy = reflect(y as isize - r, h);
                    let sx = reflect(x as isize - r, w);
                    out[(ch * ph + y) * pw + x] = img.get(ch, sy, sx);
                }
            }
        }
        out
    };
    let (pl, pr) = (pad(left), pad(right));
    let k = patch;
    Ok(DisparityMap::from_fn(w, h, |y, x| {
        let mut best = (f64::INFINITY, 0usize);
        for d in 0..d_max.min(x + 1) {
            let mut ssd = 0.0;
            for ch in 0..c {
                for dy in 0..k {
                    let row = (ch * ph + y + dy) * pw;
                    for dx in 0..k {
                        let e = pl[row + x + dx] - pr[row + x - d + dx];
                        ssd += e * e;
                    }
                }
            }
            if ssd < best.0 {
                best = (ssd, d);
            }
        }
        Some(best.1 as f32)
    }))
}

/// A representation to be diagnosed.
pub enum FeatureSpace<'a> {
    /// Raw pixels, matched with 5x5 patches.
    Image,
    /// A trained (or untrained) extractor.
    Network {
        label: String,
        config: &'a NetworkConfig,
        extractor: &'a ParamSet,
    },
}

impl FeatureSpace<'_> {
    pub fn label(&self) -> &str {
        match self {
            FeatureSpace::Image => "image",
            FeatureSpace::Network { label, .. } => label,
        }
    }
}

pub const IMAGE_PATCH: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SpaceReport {
    pub space_label: String,
    pub scene_id: String,
    /// Degradation-agnostic score; infinite when the features coincide.
    pub psnr_db: f64,
    /// Matching-specific score.
    pub wta_3pe_percent: f64,
}

impl SpaceReport {
    pub const TSV_HEADER: &'static str = "space\tscene\tpsnr_db\twta_3pe_percent";
}

impl fmt::Display for SpaceReport {
    /// One tab-separated row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.4}\t{:.4}", self.space_label, self.scene_id, self.psnr_db, self.wta_3pe_percent)
    }
}

/// PSNR between the representations of the high-resolution and the upsampled
/// right view, and 3PE of winner-takes-all matching between the left view and
/// the upsampled right view. `d_max` is in full-resolution pixels.
pub fn evaluate_space(space: &FeatureSpace, sample: &StereoSample, d_max: usize) -> Result<SpaceReport> {
    let hr = sample
        .right_hr
        .as_ref()
        .ok_or_else(|| crate::Error::Argument(format!("{}: no high-resolution right view", sample.scene_id)))?;
    let gt = sample
        .gt_disparity
        .as_ref()
        .ok_or_else(|| crate::Error::Argument(format!("{}: no ground-truth disparity", sample.scene_id)))?;
    let (psnr_db, disparity) = match space {
        FeatureSpace::Image => (
            feature_psnr(&hr.to_tensor(), &sample.right_up.to_tensor())?,
            patch_match_image(&sample.left, &sample.right_up, IMAGE_PATCH, d_max + 1)?,
        ),
        FeatureSpace::Network { config, extractor, .. } => {
            let f = |img: &Image| extract_features_with(img, config, extractor);
            let (f_hr, f_up, f_left) = (f(hr)?, f(&sample.right_up)?, f(&sample.left)?);
            let stride = config.feature_stride;
            let coarse = wta_match(&f_left, &f_up, d_max / stride + 1)?;
            (
                feature_psnr(f_hr.tensor(), f_up.tensor())?,
                coarse.upsample_nearest_scaled(stride),
            )
        }
    };
    Ok(SpaceReport {
        space_label: space.label().to_string(),
        scene_id: sample.scene_id.clone(),
        psnr_db,
        wta_3pe_percent: three_pixel_error(&disparity, gt)?,
    })
}

/// Per-scene reports plus their mean, labelled `mean`.
pub fn evaluate_space_over(space: &FeatureSpace, samples: &[StereoSample], d_max: usize) -> Result<(Vec<SpaceReport>, SpaceReport)> {
    ensure_arg!(!samples.is_empty(), "no scenes to evaluate");
    let rows = samples.iter().map(|s| evaluate_space(space, s, d_max)).collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = SpaceReport {
        space_label: space.label().to_string(),
        scene_id: "mean".into(),
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        wta_3pe_percent: rows.iter().map(|r| r.wta_3pe_percent).sum::<f64>() / n,
    };
    Ok((rows, mean))
}
