//! Synthesis of the low-resolution view and its bicubic upsampling.
//!
//! Five degradations are supported: bicubic downsampling, isotropic and
//! anisotropic Gaussian blur followed by subsampling, and the two Gaussian
//! variants followed by JPEG compression of the low-resolution result.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ExtendedColorType, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{ensure_arg, Error, Result};
use crate::imagecore::{ColorSpace, Image};

pub const SUPPORTED_SCALES: [usize; 5] = [2, 3, 4, 6, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DegradationMode {
    Bic,
    Ig,
    Ag,
    IgJpeg,
    AgJpeg,
}

impl DegradationMode {
    pub const ALL: [DegradationMode; 5] = [
        DegradationMode::Bic,
        DegradationMode::Ig,
        DegradationMode::Ag,
        DegradationMode::IgJpeg,
        DegradationMode::AgJpeg,
    ];

    pub fn uses_kernel(self) -> bool {
        !matches!(self, DegradationMode::Bic)
    }

    pub fn uses_jpeg(self) -> bool {
        matches!(self, DegradationMode::IgJpeg | DegradationMode::AgJpeg)
    }

    pub fn is_anisotropic(self) -> bool {
        matches!(self, DegradationMode::Ag | DegradationMode::AgJpeg)
    }
}

impl fmt::Display for DegradationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            DegradationMode::Bic => "BIC",
            DegradationMode::Ig => "IG",
            DegradationMode::Ag => "AG",
            DegradationMode::IgJpeg => "IG_JPEG",
            DegradationMode::AgJpeg => "AG_JPEG",
        })
    }
}

impl FromStr for DegradationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BIC" => Ok(DegradationMode::Bic),
            "IG" => Ok(DegradationMode::Ig),
            "AG" => Ok(DegradationMode::Ag),
            "IG_JPEG" => Ok(DegradationMode::IgJpeg),
            "AG_JPEG" => Ok(DegradationMode::AgJpeg),
            other => Err(Error::Argument(format!("unknown degradation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernelSpec {
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Rotation of the `sigma_x` axis, radians.
    pub theta: f64,
    pub size: usize,
}

impl GaussianKernelSpec {
    /// Support `2 * ceil(3 * max_sigma) + 1`.
    pub fn new(sigma_x: f64, sigma_y: f64, theta: f64) -> Self {
        let size = 2 * (3.0 * sigma_x.max(sigma_y)).ceil() as usize + 1;
        GaussianKernelSpec {
            sigma_x,
            sigma_y,
            theta,
            size: size.max(3),
        }
    }

    pub fn isotropic(sigma: f64) -> Self {
        Self::new(sigma, sigma, 0.0)
    }

    pub fn is_isotropic(&self) -> bool {
        self.sigma_x == self.sigma_y && self.theta == 0.0
    }
}

/// Square, odd-sized filter stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    size: usize,
    data: Vec<f64>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }
}

/// Samples the rotated bivariate Gaussian density at integer offsets and normalises to sum 1.
pub fn make_gaussian_kernel(spec: &GaussianKernelSpec) -> Result<Kernel> {
    ensure_arg!(spec.size % 2 == 1 && spec.size >= 3, "kernel size must be odd and >= 3, got {}", spec.size);
    ensure_arg!(
        spec.sigma_x > 0.0 && spec.sigma_y > 0.0 && spec.sigma_x.is_finite() && spec.sigma_y.is_finite(),
        "kernel sigmas must be positive"
    );
    let (s, c) = spec.theta.sin_cos();
    let (ix, iy) = (1.0 / (spec.sigma_x * spec.sigma_x), 1.0 / (spec.sigma_y * spec.sigma_y));
    // inverse covariance R diag(ix, iy) R^T
    let a = c * c * ix + s * s * iy;
    let b = c * s * (ix - iy);
    let d = s * s * ix + c * c * iy;
    let r = (spec.size / 2) as f64;
    let mut data = Vec::with_capacity(spec.size * spec.size);
    for row in 0..spec.size {
        let y = row as f64 - r;
        for col in 0..spec.size {
            let x = col as f64 - r;
            data.push((-0.5 * (a * x * x + 2.0 * b * x * y + d * y * y)).exp());
        }
    }
    let sum: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= sum);
    Ok(Kernel {
        size: spec.size,
        data,
    })
}

/// Everything needed to reproduce one low-resolution view.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub scale: usize,
    pub mode: DegradationMode,
    pub kernel: Option<GaussianKernelSpec>,
    pub jpeg_quality: Option<u8>,
    pub rng_seed: u64,
}

impl DegradationSpec {
    pub fn bicubic(scale: usize) -> Self {
        DegradationSpec {
            scale,
            mode: DegradationMode::Bic,
            kernel: None,
            jpeg_quality: None,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            SUPPORTED_SCALES.contains(&self.scale),
            "asymmetric factor {} not in {:?}",
            self.scale,
            SUPPORTED_SCALES
        );
        ensure_arg!(
            self.mode.uses_kernel() == self.kernel.is_some(),
            "mode {} {} a kernel",
            self.mode,
            if self.mode.uses_kernel() { "requires" } else { "forbids" }
        );
        if let Some(k) = &self.kernel {
            if !self.mode.is_anisotropic() {
                ensure_arg!(k.is_isotropic(), "mode {} needs an isotropic kernel", self.mode);
            }
        }
        ensure_arg!(
            self.mode.uses_jpeg() == self.jpeg_quality.is_some(),
            "mode {} {} a JPEG quality",
            self.mode,
            if self.mode.uses_jpeg() { "requires" } else { "forbids" }
        );
        if let Some(q) = self.jpeg_quality {
            ensure_arg!((5..=100).contains(&q), "JPEG quality {q} outside [5, 100]");
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("scale", self.scale);
        kv.set("mode", self.mode);
        kv.set("rng_seed", self.rng_seed);
        if let Some(k) = &self.kernel {
            kv.set("sigma_x", k.sigma_x);
            kv.set("sigma_y", k.sigma_y);
            kv.set("theta", k.theta);
            kv.set("kernel_size", k.size);
        }
        if let Some(q) = self.jpeg_quality {
            kv.set("jpeg_quality", q);
        }
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(&["scale", "mode", "rng_seed", "sigma_x", "sigma_y", "theta", "kernel_size", "jpeg_quality"])?;
        let kernel = match kv.get::<f64>("sigma_x")? {
            Some(sigma_x) => Some(GaussianKernelSpec {
                sigma_x,
                sigma_y: kv.require("sigma_y")?,
                theta: kv.require("theta")?,
                size: kv.require("kernel_size")?,
            }),
            None => None,
        };
        let spec = DegradationSpec {
            scale: kv.require("scale")?,
            mode: kv.require::<String>("mode")?.parse()?,
            kernel,
            jpeg_quality: kv.get("jpeg_quality")?,
            rng_seed: kv.get("rng_seed")?.unwrap_or(0),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Ranges from which per-scene degradations are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationTemplate {
    pub scale: usize,
    pub mode: DegradationMode,
    pub seed: u64,
    pub iso_sigma: (f64, f64),
    pub aniso_sigma: (f64, f64),
    pub jpeg_quality: (u8, u8),
}

impl DegradationTemplate {
    pub fn new(scale: usize, mode: DegradationMode, seed: u64) -> Self {
        DegradationTemplate {
            scale,
            mode,
            seed,
            iso_sigma: (0.6, 2.4),
            aniso_sigma: (0.6, 3.0),
            jpeg_quality: (30, 90),
        }
    }

    /// Deterministic draw for the `index`-th scene.
    pub fn sample(&self, index: u64) -> DegradationSpec {
        let scene_seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let kernel = match self.mode {
            DegradationMode::Bic => None,
            DegradationMode::Ig | DegradationMode::IgJpeg => {
                let s = rng.random_range(self.iso_sigma.0..=self.iso_sigma.1);
                Some(GaussianKernelSpec::isotropic(s))
            }
            DegradationMode::Ag | DegradationMode::AgJpeg => {
                let sx = rng.random_range(self.aniso_sigma.0..=self.aniso_sigma.1);
                let sy = rng.random_range(self.aniso_sigma.0..=self.aniso_sigma.1);
                let theta = rng.random_range(0.0..PI);
                Some(GaussianKernelSpec::new(sx, sy, theta))
            }
        };
        let jpeg_quality = self
            .mode
            .uses_jpeg()
            .then(|| rng.random_range(self.jpeg_quality.0..=self.jpeg_quality.1));
        DegradationSpec {
            scale: self.scale,
            mode: self.mode,
            kernel,
            jpeg_quality,
            rng_seed: scene_seed,
        }
    }
}

/// Reflection about the edge samples (`-1 -> 1`), repeated for far indices.
#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Keys cubic convolution kernel.
#[inline]
fn cubic(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

const BICUBIC_A: f64 = -0.5;

/// Resampling taps `(index, weight)` for every output sample along one axis.
/// `stretch > 1` widens the kernel for antialiased downsampling.
fn resample_taps(n_in: usize, n_out: usize, stretch: f64) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let u = (o as f64 + 0.5) * ratio - 0.5;
            let reach = 2.0 * stretch;
            let lo = (u - reach).floor() as isize;
            let hi = (u + reach).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut sum = 0.0;
            for j in lo..=hi {
                let wgt = cubic((u - j as f64) / stretch, BICUBIC_A);
                if wgt == 0.0 {
                    continue;
                }
                sum += wgt;
                let idx = j.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= sum);
            taps
        })
        .collect()
}

fn separable_resample(img: &Image, out_w: usize, out_h: usize, stretch: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let tx = resample_taps(w, out_w, stretch);
    let ty = resample_taps(h, out_h, stretch);
    let mut data = Vec::with_capacity(out_w * out_h * img.channels());
    let mut rows = vec![0.0; h * out_w];
    for c in 0..img.channels() {
        let p = img.plane(c);
        for y in 0..h {
            for (ox, taps) in tx.iter().enumerate() {
                rows[y * out_w + ox] = taps.iter().map(|(i, wt)| wt * p[y * w + i]).sum();
            }
        }
        for taps in &ty {
            for ox in 0..out_w {
                let v: f64 = taps.iter().map(|(i, wt)| wt * rows[i * out_w + ox]).sum();
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_w, out_h, img.color(), data).expect("resample output in range")
}

/// Bicubic (`a = -0.5`) upsampling by `s` with half-pixel-centred grids and
/// edge clamping; the result is clipped to `[0, 1]`.
pub fn upsample_bicubic(lr: &Image, s: usize) -> Image {
    if s <= 1 {
        return lr.clone();
    }
    separable_resample(lr, lr.width() * s, lr.height() * s, 1.0)
}

/// Blur with `kernel` (reflect padding) and keep every `s`-th sample starting at `(s-1)/2`.
fn blur_subsample(img: &Image, kernel: &Kernel, s: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    let (ow, oh) = (w / s, h / s);
    let off = (s - 1) / 2;
    let r = (kernel.size() / 2) as isize;
    let k = kernel.size();
    Image::from_fn(ow, oh, img.color(), |c, oy, ox| {
        let p = img.plane(c);
        let (cy, cx) = ((oy * s + off) as isize, (ox * s + off) as isize);
        let mut acc = 0.0;
        for ky in 0..k {
            let yy = reflect_index(cy + ky as isize - r, h);
            for kx in 0..k {
                let xx = reflect_index(cx + kx as isize - r, w);
                acc += kernel.at(ky, kx) * p[yy * w + xx];
            }
        }
        acc
    })
}

fn jpeg_round_trip(img: &Image, quality: u8) -> Result<Image> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let n = w * h;
    let raw: Vec<u8> = (0..n * c)
        .map(|i| (img.data()[(i % c) * n + i / c].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut buf = Vec::new();
    let color = match img.color() {
        ColorSpace::Gray => ExtendedColorType::L8,
        ColorSpace::Rgb => ExtendedColorType::Rgb8,
    };
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(&raw, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("JPEG encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| Error::Format(format!("JPEG decode: {e}")))?;
    let planar = |bytes: &[u8], stride: usize| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for (i, px) in bytes.chunks(stride).enumerate() {
            for ch in 0..c {
                out[ch * n + i] = px[ch] as f64 / 255.0;
            }
        }
        out
    };
    let data = match (img.color(), decoded) {
        (ColorSpace::Gray, DynamicImage::ImageLuma8(b)) => planar(b.as_raw(), 1),
        (ColorSpace::Gray, other) => planar(other.to_luma8().as_raw(), 1),
        (ColorSpace::Rgb, other) => planar(other.to_rgb8().as_raw(), 3),
    };
    Image::new(w, h, img.color(), data)
}

/// Produces the `H/s x W/s` low-resolution view described by `spec`.
pub fn degrade(hr: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    let s = spec.scale;
    ensure_arg!(
        hr.width() % s == 0 && hr.height() % s == 0,
        "image {}x{} not divisible by factor {}",
        hr.width(),
        hr.height(),
        s
    );
    let lr = match spec.mode {
        DegradationMode::Bic => separable_resample(hr, hr.width() / s, hr.height() / s, s as f64),
        _ => {
            let kernel = make_gaussian_kernel(spec.kernel.as_ref().expect("validated"))?;
            blur_subsample(hr, &kernel, s)
        }
    };
    match spec.jpeg_quality {
        Some(q) => jpeg_round_trip(&lr, q),
        None => Ok(lr),
    }
}
