//! Training objectives. Each loss exists as a tape builder (`*_graph`) used by
//! the trainer and as a value-only wrapper over the same code.

use crate::autodiff::{Graph, Var};
use crate::error::{ensure_arg, Error, Result};
use crate::geometry::{pool_mask, WarpResult};
use crate::imagecore::{DisparityMap, Image};
use crate::network::FeatureMap;
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the `1 - SSIM` term.
    pub alpha: f64,
    /// Weight of the smoothness term.
    pub lambda: f64,
    pub ssim_window: usize,
    pub use_warp_mask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 3.0,
            lambda: 0.1,
            ssim_window: 3,
            use_warp_mask: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            self.alpha >= 0.0 && self.lambda >= 0.0,
            "alpha and lambda must be non-negative"
        );
        ensure_arg!(self.ssim_window % 2 == 1, "ssim_window must be odd");
        Ok(())
    }
}

/// Per-channel SSIM map `[C, H, W]` of two same-shaped planar tensors.
pub fn ssim_graph(g: &mut Graph, a: Var, b: Var, window: usize) -> Var {
    let mu_a = g.avg_pool(a, window);
    let mu_b = g.avg_pool(b, window);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = g.avg_pool(aa, window);
    let e_bb = g.avg_pool(bb, window);
    let e_ab = g.avg_pool(ab, window);
    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);

    let lum_n = g.scale(mu_ab, 2.0);
    let lum_n = g.add_scalar(lum_n, SSIM_C1);
    let con_n = g.scale(cov, 2.0);
    let con_n = g.add_scalar(con_n, SSIM_C2);
    let num = g.mul(lum_n, con_n);
    let lum_d = g.add(mu_aa, mu_bb);
    let lum_d = g.add_scalar(lum_d, SSIM_C1);
    let con_d = g.add(var_a, var_b);
    let con_d = g.add_scalar(con_d, SSIM_C2);
    let den = g.mul(lum_d, con_d);
    g.div(num, den)
}

/// Per-pixel SSIM averaged over channels, `[H, W]`.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize) -> Result<Tensor> {
    ensure_arg!(a.shape() == b.shape(), "ssim: shapes differ");
    ensure_arg!(window % 2 == 1, "ssim: window must be odd");
    let (c, h, w) = a.planes();
    ensure_arg!(h > window / 2 && w > window / 2, "ssim: input smaller than window");
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let map = ssim_graph(&mut g, va, vb, window);
    let m = g.value(map).data();
    let mut out = Tensor::zeros(&[h, w]);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = (0..c).map(|ch| m[ch * h * w + i]).sum::<f64>() / c as f64;
    }
    Ok(out)
}

/// `mean over masked pixels and channels of |a - b| + alpha * (1 - SSIM)`.
///
/// `mask` is per pixel (`H * W`); `None` means every pixel counts.
pub fn reconstruction_graph(
    g: &mut Graph,
    target: Var,
    warped: Var,
    mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<Var> {
    let shape = g.value(target).shape().to_vec();
    ensure_arg!(
        shape == g.value(warped).shape(),
        "reconstruction loss: shapes differ"
    );
    let (c, h, w) = g.value(target).planes();
    let plane = h * w;
    let count = match mask {
        Some(m) => {
            ensure_arg!(m.len() == plane, "reconstruction loss: mask size mismatch");
            m.iter().filter(|v| **v).count()
        }
        None => plane,
    };
    if count == 0 {
        return Err(Error::Degenerate("reconstruction loss: empty mask".into()));
    }
    let norm = 1.0 / (count * c) as f64;
    let weights = Tensor::from_vec(
        &shape,
        (0..c * plane)
            .map(|i| match mask {
                Some(m) if !m[i % plane] => 0.0,
                _ => norm,
            })
            .collect(),
    )?;
    let weights = g.constant(weights);

    let diff = g.sub(target, warped);
    let l1 = g.abs(diff);
    let mut per_pixel = l1;
    if cfg.alpha != 0.0 {
        let s = ssim_graph(g, target, warped, cfg.ssim_window);
        let dis = g.scale(s, -cfg.alpha);
        let dis = g.add_scalar(dis, cfg.alpha);
        per_pixel = g.add(per_pixel, dis);
    }
    let weighted = g.mul(per_pixel, weights);
    Ok(g.sum(weighted))
}

fn eval_reconstruction(target: &Tensor, warped: &Tensor, mask: Option<&[bool]>, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let mut g = Graph::new();
    let (t, w) = (g.constant(target.clone()), g.constant(warped.clone()));
    let l = reconstruction_graph(&mut g, t, w, mask, cfg)?;
    Ok(g.value(l).item())
}

pub fn photometric_loss(left: &Image, warped: &WarpResult<Image>, cfg: &LossConfig) -> Result<f64> {
    ensure_arg!(left.same_shape(&warped.warped), "photometric loss: shapes differ");
    ensure_arg!(
        left.width().min(left.height()) >= crate::imagecore::MIN_SIDE,
        "photometric loss: image smaller than {} px",
        crate::imagecore::MIN_SIDE
    );
    let mask = cfg.use_warp_mask.then_some(warped.in_bounds.as_slice());
    eval_reconstruction(&left.to_tensor(), &warped.warped.to_tensor(), mask, cfg)
}

/// Brings a warp mask to the resolution of a feature map. A full-resolution
/// mask is pooled (a coarse pixel survives only if its whole block does).
pub fn feature_mask(mask: &[bool], fw: usize, fh: usize, stride: usize) -> Result<Vec<bool>> {
    if mask.len() == fw * fh {
        Ok(mask.to_vec())
    } else if mask.len() == fw * fh * stride * stride {
        Ok(pool_mask(mask, fw * stride, fh * stride, stride))
    } else {
        Err(Error::Argument("feature loss: mask size matches neither resolution".into()))
    }
}

/// `F_warped` is the extractor applied to the warped image; its mask may be
/// the full-resolution warp mask.
pub fn feature_metric_loss(left: &FeatureMap, warped: &WarpResult<FeatureMap>, cfg: &LossConfig) -> Result<f64> {
    ensure_arg!(
        left.tensor().shape() == warped.warped.tensor().shape(),
        "feature-metric loss: shapes differ"
    );
    let mask = if cfg.use_warp_mask {
        Some(feature_mask(&warped.in_bounds, left.width(), left.height(), left.stride())?)
    } else {
        None
    };
    eval_reconstruction(left.tensor(), warped.warped.tensor(), mask.as_deref(), cfg)
}

/// Constant per-pair weights for the smoothness term: `exp(-|dI|)` with the
/// image gradient averaged over channels, zeroed where either disparity is
/// invalid, and divided by the number of valid pairs along each axis.
pub fn smoothness_weights(img: &Image, valid: Option<&[bool]>) -> (Tensor, Tensor) {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let ok = |i: usize| valid.is_none_or(|v| v[i]);
    let grad = |a: usize, b: usize| (0..c).map(|ch| (img.plane(ch)[b] - img.plane(ch)[a]).abs()).sum::<f64>() / c as f64;

    let mut wx = Tensor::zeros(&[h, w - 1]);
    for y in 0..h {
        for x in 0..w - 1 {
            let (a, b) = (y * w + x, y * w + x + 1);
            if ok(a) && ok(b) {
                wx.data_mut()[y * (w - 1) + x] = (-grad(a, b)).exp();
            }
        }
    }
    let mut wy = Tensor::zeros(&[h - 1, w]);
    for y in 0..h - 1 {
        for x in 0..w {
            let (a, b) = (y * w + x, (y + 1) * w + x);
            if ok(a) && ok(b) {
                wy.data_mut()[y * w + x] = (-grad(a, b)).exp();
            }
        }
    }
    for t in [&mut wx, &mut wy] {
        let n = t.data().iter().filter(|v| **v > 0.0).count();
        if n > 0 {
            t.scale_in_place(1.0 / n as f64);
        }
    }
    (wx, wy)
}

/// Edge-aware smoothness of a `[H, W]` disparity on the tape.
pub fn smoothness_graph(g: &mut Graph, disp: Var, weights: (Tensor, Tensor)) -> Var {
    let (wx, wy) = (g.constant(weights.0), g.constant(weights.1));
    let dx = g.diff_x(disp);
    let dx = g.abs(dx);
    let tx = g.mul(dx, wx);
    let tx = g.sum(tx);
    let dy = g.diff_y(disp);
    let dy = g.abs(dy);
    let ty = g.mul(dy, wy);
    let ty = g.sum(ty);
    g.add(tx, ty)
}

pub fn smoothness_loss(d: &DisparityMap, left: &Image) -> Result<f64> {
    ensure_arg!(
        d.width() == left.width() && d.height() == left.height(),
        "smoothness loss: disparity and image sizes differ"
    );
    ensure_arg!(d.width() >= 2 && d.height() >= 2, "smoothness loss: need at least 2x2 pixels");
    let mut g = Graph::new();
    let dv = g.constant(d.to_tensor());
    let l = smoothness_graph(&mut g, dv, smoothness_weights(left, Some(d.valid_mask())));
    Ok(g.value(l).item())
}

pub fn total_graph(g: &mut Graph, data: Var, smooth: Var, cfg: &LossConfig) -> Var {
    let s = g.scale(smooth, cfg.lambda);
    g.add(data, s)
}

pub fn total_loss(data_term: f64, smooth_term: f64, cfg: &LossConfig) -> f64 {
    data_term + cfg.lambda * smooth_term
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::warp_right_to_left;
    use crate::imagecore::ColorSpace;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random()).collect()).unwrap()
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, ColorSpace::Rgb, |_, _, _| rng.random())
    }

    fn reflect(i: isize, n: usize) -> usize {
        let n = n as isize;
        let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
        r as usize
    }

    // Direct windowed SSIM, one pixel at a time.
    fn ssim_oracle(a: &Tensor, b: &Tensor, win: usize) -> Vec<f64> {
        let (c, h, w) = a.planes();
        let r = (win / 2) as isize;
        let n = (win * win) as f64;
        let mut out = vec![0.0; h * w];
        for ch in 0..c {
            let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
            let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut vals = Vec::new();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let j = reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w);
                            vals.push((pa[j], pb[j]));
                        }
                    }
                    let ma = vals.iter().map(|v| v.0).sum::<f64>() / n;
                    let mb = vals.iter().map(|v| v.1).sum::<f64>() / n;
                    let va = vals.iter().map(|v| (v.0 - ma).powi(2)).sum::<f64>() / n;
                    let vb = vals.iter().map(|v| (v.1 - mb).powi(2)).sum::<f64>() / n;
                    let cov = vals.iter().map(|v| (v.0 - ma) * (v.1 - mb)).sum::<f64>() / n;
                    let s = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    out[y * w + x] += s / c as f64;
                }
            }
        }
        out
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&[3, 12, 10], &mut rng);
        let b = random_tensor(&[3, 12, 10], &mut rng);
        assert!(ssim(&a, &a, 3).unwrap().data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let ab = ssim(&a, &b, 3).unwrap();
        let ba = ssim(&b, &a, 3).unwrap();
        assert!(ab.max_abs_diff(&ba) < 1e-12);
        let oracle = ssim_oracle(&a, &b, 3);
        for (x, y) in ab.data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(ssim(&a, &random_tensor(&[3, 12, 9], &mut rng), 3).is_err());
    }

    #[test]
    fn ssim_anticorrelated_checkerboard() {
        let (h, w) = (10, 10);
        let x = Tensor::from_vec(&[1, h, w], (0..h * w).map(|i| ((i / w + i % w) % 2) as f64).collect()).unwrap();
        let inv = Tensor::from_vec(&[1, h, w], x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&x, &inv, 3).unwrap();
        let oracle = ssim_oracle(&x, &inv, 3);
        // Interior 3x3 windows hold 5 of one value and 4 of the other:
        // correlation is exactly -1, the luminance term is slightly below one.
        let (m1, m2) = (5.0 / 9.0, 4.0 / 9.0);
        let var = m1 * m2;
        let closed = (2.0 * m1 * m2 + SSIM_C1) * (-2.0 * var + SSIM_C2) / ((m1 * m1 + m2 * m2 + SSIM_C1) * (2.0 * var + SSIM_C2));
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = s.data()[y * w + x];
                assert!((v - oracle[y * w + x]).abs() < 1e-12);
                assert!((v - closed).abs() < 1e-12);
                assert!(v < -0.97);
            }
        }
    }

    #[test]
    fn photometric_identity_and_constant_offset() {
        let img = random_image(16, 12, 3);
        let same = WarpResult { warped: img.clone(), in_bounds: vec![true; 16 * 12] };
        assert!(photometric_loss(&img, &same, &LossConfig::default()).unwrap().abs() < 1e-9);

        let a = Image::filled(16, 12, ColorSpace::Rgb, 0.3);
        let b = WarpResult { warped: Image::filled(16, 12, ColorSpace::Rgb, 0.45), in_bounds: vec![true; 16 * 12] };
        let cfg = LossConfig { alpha: 0.0, ..LossConfig::default() };
        assert!((photometric_loss(&a, &b, &cfg).unwrap() - 0.15).abs() < 1e-12);

        let empty = WarpResult { warped: img.clone(), in_bounds: vec![false; 16 * 12] };
        assert!(matches!(photometric_loss(&img, &empty, &LossConfig::default()), Err(Error::Degenerate(_))));
        let off = LossConfig { use_warp_mask: false, ..LossConfig::default() };
        assert!(photometric_loss(&img, &empty, &off).unwrap().abs() < 1e-9);
    }

    #[test]
    fn photometric_matches_direct_formula() {
        let (l, r) = (random_image(16, 12, 4), random_image(16, 12, 5));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask: Vec<bool> = (0..16 * 12).map(|_| rng.random_bool(0.8)).collect();
        let wr = WarpResult { warped: r.clone(), in_bounds: mask.clone() };
        let got = photometric_loss(&l, &wr, &LossConfig::default()).unwrap();
        let s = ssim_oracle(&l.to_tensor(), &r.to_tensor(), 3);
        let (mut acc, mut n) = (0.0, 0);
        for i in 0..16 * 12 {
            if mask[i] {
                let l1 = (0..3).map(|c| (l.plane(c)[i] - r.plane(c)[i]).abs()).sum::<f64>() / 3.0;
                acc += l1 + 3.0 * (1.0 - s[i]);
                n += 1;
            }
        }
        assert!((got - acc / n as f64).abs() < 1e-8);
        assert!(got >= 0.0);
    }

    #[test]
    fn feature_metric_offset_in_one_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_tensor(&[4, 6, 8], &mut rng);
        let mut shifted = f.clone();
        for v in &mut shifted.data_mut()[2 * 48..3 * 48] {
            *v += 0.2;
        }
        let left = FeatureMap::new(f.clone(), 4).unwrap();
        let wr = WarpResult { warped: FeatureMap::new(shifted, 4).unwrap(), in_bounds: vec![true; 24 * 32] };
        let cfg = LossConfig { alpha: 0.0, ..LossConfig::default() };
        assert!((feature_metric_loss(&left, &wr, &cfg).unwrap() - 0.2 / 4.0).abs() < 1e-12);
        let same = WarpResult { warped: left.clone(), in_bounds: vec![true; 48] };
        assert!(feature_metric_loss(&left, &same, &LossConfig::default()).unwrap().abs() < 1e-9);
    }

    #[test]
    fn feature_metric_pools_full_resolution_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = (random_tensor(&[3, 4, 4], &mut rng), random_tensor(&[3, 4, 4], &mut rng));
        let mut full = vec![true; 16 * 16];
        full[0] = false; // kills coarse pixel (0, 0)
        let left = FeatureMap::new(a.clone(), 4).unwrap();
        let wr = WarpResult { warped: FeatureMap::new(b.clone(), 4).unwrap(), in_bounds: full };
        let got = feature_metric_loss(&left, &wr, &LossConfig::default()).unwrap();
        let s = ssim_oracle(&a, &b, 3);
        let mut acc = 0.0;
        for i in 1..16 {
            acc += (0..3).map(|c| (a.data()[c * 16 + i] - b.data()[c * 16 + i]).abs()).sum::<f64>() / 3.0;
            acc += 3.0 * (1.0 - s[i]);
        }
        assert!((got - acc / 15.0).abs() < 1e-8);
    }

    #[test]
    fn smoothness_closed_forms() {
        let img = Image::filled(9, 7, ColorSpace::Rgb, 0.5);
        assert_eq!(smoothness_loss(&DisparityMap::filled(9, 7, 3.0), &img).unwrap(), 0.0);
        let ramp = DisparityMap::from_fn(9, 7, |_, x| Some(x as f32));
        assert!((smoothness_loss(&ramp, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothness_matches_direct_formula() {
        let img = random_image(11, 9, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = DisparityMap::from_fn(11, 9, |_, _| Some(rng.random_range(0.0..8.0)));
        let got = smoothness_loss(&d, &img).unwrap();
        let di = |y: usize, x: usize| d.get(y, x).unwrap() as f64;
        let gi = |y0: usize, x0: usize, y1: usize, x1: usize| {
            (0..3).map(|c| (img.get(c, y1, x1) - img.get(c, y0, x0)).abs()).sum::<f64>() / 3.0
        };
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..9 {
            for x in 0..10 {
                sx += (di(y, x + 1) - di(y, x)).abs() * (-gi(y, x, y, x + 1)).exp();
            }
        }
        for y in 0..8 {
            for x in 0..11 {
                sy += (di(y + 1, x) - di(y, x)).abs() * (-gi(y, x, y + 1, x)).exp();
            }
        }
        assert!((got - (sx / 90.0 + sy / 88.0)).abs() < 1e-8);
    }

    #[test]
    fn total_is_weighted_sum() {
        let cfg = LossConfig::default();
        assert!((total_loss(1.0, 2.0, &cfg) - 1.2).abs() < 1e-15);
        let zero = LossConfig { lambda: 0.0, ..cfg };
        assert_eq!(total_loss(0.7, 5.0, &zero), 0.7);
    }

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x: &Tensor, samples: usize, seed: u64) {
        let eval = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(t.clone());
            let l = build(&mut g, v);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let l = build(&mut g, v);
        g.backward(l);
        let grad = g.grad(v).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let i = rng.random_range(0..x.len());
            let h = 1e-6;
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let err = (grad.data()[i] - fd).abs() / fd.abs().max(1e-4);
            assert!(err < 1e-3, "element {i}: analytic {} fd {fd}", grad.data()[i]);
        }
    }

    #[test]
    fn ssim_and_reconstruction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&[2, 16, 16], &mut rng);
        let b = random_tensor(&[2, 16, 16], &mut rng);
        let bc = b.clone();
        fd_check(
            move |g, v| {
                let c = g.constant(bc.clone());
                let s = ssim_graph(g, v, c, 3);
                g.sum(s)
            },
            &a,
            30,
            1,
        );
        let mask: Vec<bool> = (0..256).map(|i| i % 7 != 0).collect();
        fd_check(
            move |g, v| {
                let c = g.constant(b.clone());
                reconstruction_graph(g, c, v, Some(&mask), &LossConfig::default()).unwrap()
            },
            &a,
            30,
            2,
        );
    }

    #[test]
    fn smoothness_gradient() {
        let img = random_image(16, 16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = Tensor::from_vec(&[16, 16], (0..256).map(|_| rng.random_range(0.0..8.0)).collect()).unwrap();
        fd_check(move |g, v| smoothness_graph(g, v, smoothness_weights(&img, None)), &d, 30, 3);
    }

    #[test]
    fn photometric_gradient_through_warp() {
        let (l, r) = (random_image(16, 16, 14), random_image(16, 16, 15));
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        // keep away from integer knots so the check is smooth
        let d = Tensor::from_vec(&[16, 16], (0..256).map(|_| rng.random_range(0..4) as f64 + rng.random_range(0.1..0.9)).collect()).unwrap();
        let (lt, rt) = (l.to_tensor(), r.to_tensor());
        fd_check(
            move |g, v| {
                let (a, b) = (g.constant(lt.clone()), g.constant(rt.clone()));
                let wp = g.warp(b, v);
                let mask = g.warp_mask(wp).unwrap().to_vec();
                reconstruction_graph(g, a, wp, Some(&mask), &LossConfig::default()).unwrap()
            },
            &d,
            30,
            4,
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn losses_are_non_negative_and_zero_on_identity(seed in 0u64..100_000) {
            let img = random_image(12, 10, seed);
            let id = warp_right_to_left(&img, &DisparityMap::filled(12, 10, 0.0)).unwrap();
            prop_assert!(photometric_loss(&img, &id, &LossConfig::default()).unwrap().abs() < 1e-8);
            let other = random_image(12, 10, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DisparityMap::from_fn(12, 10, |_, _| Some(rng.random_range(0.0..5.0)));
            let w = warp_right_to_left(&other, &d).unwrap();
            prop_assert!(photometric_loss(&img, &w, &LossConfig::default()).unwrap() >= 0.0);
            prop_assert!(smoothness_loss(&d, &img).unwrap() >= 0.0);
        }
    }
}
