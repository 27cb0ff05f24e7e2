//! Disparity accuracy: 3-pixel error and end-point error over valid ground truth.

use crate::error::{ensure_arg, Error, Result};
use crate::imagecore::DisparityMap;

fn valid_pairs<'a>(pred: &'a DisparityMap, gt: &'a DisparityMap) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    ensure_arg!(
        pred.same_shape(gt),
        "metrics: prediction is {}x{} but ground truth is {}x{}",
        pred.width(),
        pred.height(),
        gt.width(),
        gt.height()
    );
    if gt.valid_count() == 0 {
        return Err(Error::Degenerate("metrics: ground truth has no valid pixels".into()));
    }
    Ok(gt
        .data()
        .iter()
        .zip(gt.valid_mask())
        .zip(pred.data())
        .filter(|((_, ok), _)| **ok)
        .map(|((g, _), p)| (*p as f64, *g as f64)))
}

/// A pixel is bad when its error exceeds both 3 px and 5% of the true disparity.
pub fn is_bad_pixel(pred: f64, gt: f64) -> bool {
    let e = (pred - gt).abs();
    e > 3.0 && e > 0.05 * gt.abs()
}

/// Percentage of bad pixels among valid ground-truth pixels.
pub fn three_pixel_error(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    let (mut bad, mut n) = (0usize, 0usize);
    for (p, g) in valid_pairs(pred, gt)? {
        n += 1;
        bad += is_bad_pixel(p, g) as usize;
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// Mean absolute disparity error in pixels over valid ground-truth pixels.
pub fn end_point_error(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    let (mut acc, mut n) = (0.0, 0usize);
    for (p, g) in valid_pairs(pred, gt)? {
        n += 1;
        acc += (p - g).abs();
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_offsets() {
        let gt = DisparityMap::filled(8, 8, 100.0);
        assert_eq!(three_pixel_error(&gt, &gt).unwrap(), 0.0);
        assert_eq!(end_point_error(&gt, &gt).unwrap(), 0.0);
        let off = DisparityMap::filled(8, 8, 104.0);
        assert_eq!(three_pixel_error(&off, &gt).unwrap(), 0.0, "4 px is under 5% of 100");
        let far = DisparityMap::filled(8, 8, 106.0);
        assert_eq!(three_pixel_error(&far, &gt).unwrap(), 100.0);
        let plus1 = DisparityMap::from_fn(8, 8, |y, x| gt.get(y, x).map(|v| v + 1.0));
        assert_eq!(end_point_error(&plus1, &gt).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let none = DisparityMap::from_fn(4, 4, |_, _| None);
        let p = DisparityMap::filled(4, 4, 1.0);
        assert!(matches!(three_pixel_error(&p, &none), Err(Error::Degenerate(_))));
        assert!(matches!(end_point_error(&p, &none), Err(Error::Degenerate(_))));
        assert!(three_pixel_error(&DisparityMap::filled(5, 4, 1.0), &p).is_err());
    }

    fn random_pair(seed: u64, w: usize, h: usize) -> (DisparityMap, DisparityMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = DisparityMap::from_fn(w, h, |_, _| rng.random_bool(0.8).then(|| rng.random_range(0.0..100.0)));
        let pred = DisparityMap::from_fn(w, h, |y, x| Some(gt.get(y, x).unwrap_or(50.0) + rng.random_range(-10.0..10.0)));
        (pred, gt)
    }

    proptest! {
        #[test]
        fn match_brute_force_oracles(seed in 0u64..1_000_000) {
            let (pred, gt) = random_pair(seed, 8, 8);
            prop_assume!(gt.valid_count() > 0);
            let (mut bad, mut n, mut acc) = (0, 0, 0.0);
            for y in 0..8 {
                for x in 0..8 {
                    if let Some(g) = gt.get(y, x) {
                        let p = pred.get(y, x).unwrap();
                        let e = (p as f64 - g as f64).abs();
                        n += 1;
                        acc += e;
                        if e > 3.0 && e > 0.05 * g as f64 {
                            bad += 1;
                        }
                    }
                }
            }
            let tpe = three_pixel_error(&pred, &gt).unwrap();
            prop_assert_eq!(tpe, 100.0 * bad as f64 / n as f64);
            prop_assert!((0.0..=100.0).contains(&tpe));
            prop_assert!((end_point_error(&pred, &gt).unwrap() - acc / n as f64).abs() <= 1e-12);
        }

        #[test]
        fn invalid_pixels_are_ignored(seed in 0u64..1_000_000, junk in -1e3f32..1e3) {
            let (pred, gt) = random_pair(seed, 8, 6);
            prop_assume!(gt.valid_count() > 0);
            let changed = DisparityMap::from_fn(8, 6, |y, x| Some(if gt.get(y, x).is_some() { pred.get(y, x).unwrap() } else { junk }));
            prop_assert_eq!(three_pixel_error(&pred, &gt).unwrap(), three_pixel_error(&changed, &gt).unwrap());
            prop_assert_eq!(end_point_error(&pred, &gt).unwrap(), end_point_error(&changed, &gt).unwrap());
        }

        #[test]
        fn small_perturbations_keep_3pe(seed in 0u64..1_000_000, frac in 0.0f64..0.99) {
            let (_, gt) = random_pair(seed, 8, 8);
            prop_assume!(gt.valid_count() > 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let perturbed = DisparityMap::from_fn(8, 8, |y, x| {
                let g = gt.get(y, x).unwrap_or(0.0) as f64;
                let bound = 3f64.min(0.05 * g.abs()) * frac;
                Some((g + rng.random_range(-1.0..=1.0) * bound) as f32)
            });
            // f32 rounding of the perturbed value can only move it by an ulp
            prop_assert_eq!(three_pixel_error(&perturbed, &gt).unwrap(), 0.0);
        }
    }
}
