//! File boundaries: PNG (8/16-bit), PPM/PGM, PFM and KITTI 16-bit disparity PNG.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use super::colormap;
use super::{ColorSpace, DisparityMap, Image};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DisparityFormat {
    Pfm,
    KittiPng16,
}

impl DisparityFormat {
    /// Guesses from the file extension (`.pfm` or `.png`).
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "pfm" => Ok(DisparityFormat::Pfm),
            Some(e) if e == "png" => Ok(DisparityFormat::KittiPng16),
            _ => Err(Error::Argument(format!(
                "cannot infer disparity format of {}",
                path.display()
            ))),
        }
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Loads a PNG or PPM/PGM image, scaling integer samples into `[0, 1]`.
/// Alpha channels are dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (color, data): (ColorSpace, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (ColorSpace::Gray, scale(b.as_raw(), 1, 1, 255.0)),
        DynamicImage::ImageLumaA8(b) => (ColorSpace::Gray, scale(b.as_raw(), 2, 1, 255.0)),
        DynamicImage::ImageRgb8(b) => (ColorSpace::Rgb, scale(b.as_raw(), 3, 3, 255.0)),
        DynamicImage::ImageRgba8(b) => (ColorSpace::Rgb, scale(b.as_raw(), 4, 3, 255.0)),
        DynamicImage::ImageLuma16(b) => (ColorSpace::Gray, scale(b.as_raw(), 1, 1, 65535.0)),
        DynamicImage::ImageLumaA16(b) => (ColorSpace::Gray, scale(b.as_raw(), 2, 1, 65535.0)),
        DynamicImage::ImageRgb16(b) => (ColorSpace::Rgb, scale(b.as_raw(), 3, 3, 65535.0)),
        DynamicImage::ImageRgba16(b) => (ColorSpace::Rgb, scale(b.as_raw(), 4, 3, 65535.0)),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported sample type {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    // interleaved -> planar
    let c = color.channels();
    let mut planar = vec![0.0; data.len()];
    for (i, v) in data.into_iter().enumerate() {
        planar[(i % c) * w * h + i / c] = v;
    }
    Image::new(w, h, color, planar)
}

fn scale<T: Copy + Into<f64>>(raw: &[T], stride: usize, keep: usize, max: f64) -> Vec<f64> {
    raw.chunks(stride)
        .flat_map(|px| px[..keep].iter().map(move |v| (*v).into() / max))
        .collect()
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes a PNG (or PPM/PGM when the extension says so; 8-bit only).
pub fn save_image(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let n = w * h;
    let interleaved = |max: f64| -> Vec<f64> {
        (0..n * c)
            .map(|i| quantize(img.data()[(i % c) * n + i / c], max))
            .collect()
    };
    let dynimg = match (depth, img.color()) {
        (BitDepth::Eight, ColorSpace::Gray) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, to_u8(interleaved(255.0)))
                .expect("buffer size"),
        ),
        (BitDepth::Eight, ColorSpace::Rgb) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, to_u8(interleaved(255.0)))
                .expect("buffer size"),
        ),
        (BitDepth::Sixteen, ColorSpace::Gray) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, to_u16(interleaved(65535.0)))
                .expect("buffer size"),
        ),
        (BitDepth::Sixteen, ColorSpace::Rgb) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, to_u16(interleaved(65535.0)))
                .expect("buffer size"),
        ),
    };
    dynimg.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

fn to_u8(v: Vec<f64>) -> Vec<u8> {
    v.into_iter().map(|x| x as u8).collect()
}

fn to_u16(v: Vec<f64>) -> Vec<u16> {
    v.into_iter().map(|x| x as u16).collect()
}

/// Rounds every sample to the grid of the given bit depth, as a save/load cycle would.
pub fn quantize_image(img: &Image, depth: BitDepth) -> Image {
    let max = match depth {
        BitDepth::Eight => 255.0,
        BitDepth::Sixteen => 65535.0,
    };
    Image::from_fn(img.width(), img.height(), img.color(), |c, y, x| {
        quantize(img.get(c, y, x), max) / max
    })
}

pub fn load_disparity(path: impl AsRef<Path>, format: DisparityFormat) -> Result<DisparityMap> {
    let path = path.as_ref();
    match format {
        DisparityFormat::Pfm => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            read_pfm(&bytes).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
                other => other,
            })
        }
        DisparityFormat::KittiPng16 => {
            let img = decode(path)?;
            let DynamicImage::ImageLuma16(buf) = img else {
                return Err(Error::Format(format!(
                    "{}: KITTI disparity must be a 16-bit grayscale PNG",
                    path.display()
                )));
            };
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let raw = buf.into_raw();
            Ok(DisparityMap::from_fn(w, h, |y, x| {
                let v = raw[y * w + x];
                (v != 0).then(|| v as f32 / 256.0)
            }))
        }
    }
}

pub fn save_disparity(d: &DisparityMap, path: impl AsRef<Path>, format: DisparityFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        DisparityFormat::Pfm => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut out = BufWriter::new(file);
            out.write_all(&write_pfm(d)).map_err(|e| Error::io(path, e))?;
            out.flush().map_err(|e| Error::io(path, e))
        }
        DisparityFormat::KittiPng16 => {
            let (w, h) = (d.width(), d.height());
            // a valid zero would read back as invalid, so valid values floor at 1/256
            let raw: Vec<u16> = (0..w * h)
                .map(|i| match d.get(i / w, i % w) {
                    Some(v) => (v as f64 * 256.0).round().clamp(1.0, 65535.0) as u16,
                    None => 0,
                })
                .collect();
            let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size");
            buf.save(path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Format(other.to_string()),
            })
        }
    }
}

/// Encodes a single-channel little-endian PFM (scale -1, rows bottom-up).
/// Invalid pixels are written as `+inf`.
pub fn write_pfm(d: &DisparityMap) -> Vec<u8> {
    let (w, h) = (d.width(), d.height());
    let mut out = format!("Pf\n{w} {h}\n-1\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = d.get(y, x).unwrap_or(f32::INFINITY);
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes a PFM buffer. Rows are stored bottom-up; a negative scale means
/// little-endian samples. Colour (`PF`) files keep their first channel.
/// Non-finite samples become invalid pixels.
pub fn read_pfm(bytes: &[u8]) -> Result<DisparityMap> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::Format(format!("bad PFM magic {m:?}"))),
    };
    let parse_dim = |s: String| {
        s.parse::<usize>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::Format(format!("bad PFM dimension {s:?}")))
    };
    let w = parse_dim(token()?)?;
    let h = parse_dim(token()?)?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::Format(format!("bad PFM scale {scale_tok:?}")))?;
    // exactly one whitespace byte separates the header from the samples
    let body = pos + 1;
    let need = w * h * channels * 4;
    if bytes.len() < body + need {
        return Err(Error::Format(format!(
            "PFM payload too short: need {need} bytes, have {}",
            bytes.len().saturating_sub(body)
        )));
    }
    let little = scale < 0.0;
    let sample = |i: usize| {
        let b: [u8; 4] = bytes[body + 4 * i..body + 4 * i + 4].try_into().expect("4 bytes");
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    Ok(DisparityMap::from_fn(w, h, |y, x| {
        let v = sample(((h - 1 - y) * w + x) * channels);
        v.is_finite().then_some(v)
    }))
}

/// Renders `[0, d_max]` through a perceptually uniform colormap; invalid pixels are black.
pub fn render_disparity(d: &DisparityMap, path: impl AsRef<Path>, d_max: f32) -> Result<()> {
    let path = path.as_ref();
    let rgb = render_rgb(d, d_max);
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(d.width() as u32, d.height() as u32, rgb)
        .expect("buffer size");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}

/// Interleaved RGB8 rendering used by [`render_disparity`].
pub fn render_rgb(d: &DisparityMap, d_max: f32) -> Vec<u8> {
    let mut out = Vec::with_capacity(d.width() * d.height() * 3);
    for y in 0..d.height() {
        for x in 0..d.width() {
            let px = match d.get(y, x) {
                Some(v) if d_max > 0.0 => colormap::viridis((v / d_max) as f64),
                Some(_) => colormap::viridis(0.0),
                None => [0, 0, 0],
            };
            out.extend_from_slice(&px);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn png8_extremes_scale_to_unit_range() {
        let dir = tmp();
        let p = dir.path().join("g.png");
        let buf = ImageBuffer::<Luma<u8>, _>::from_raw(8, 8, (0..64).map(|i| if i == 0 { 255 } else { 0 }).collect::<Vec<_>>()).unwrap();
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 0.0);
    }

    #[test]
    fn png16_scales_by_65535() {
        let dir = tmp();
        let p = dir.path().join("g16.png");
        let buf = ImageBuffer::<Luma<u16>, _>::from_raw(8, 8, vec![32768u16; 64]).unwrap();
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.get(0, 3, 3), 32768.0 / 65535.0);
        assert!((img.get(0, 3, 3) - 0.50001).abs() < 1e-5);
    }

    #[test]
    fn rgba_drops_alpha_and_ppm_loads() {
        let dir = tmp();
        let p = dir.path().join("c.png");
        let buf = ImageBuffer::<image::Rgba<u8>, _>::from_raw(8, 8, (0..256).map(|i| (i % 4 * 60) as u8).collect::<Vec<_>>()).unwrap();
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.color(), ColorSpace::Rgb);
        assert_eq!(img.get(2, 0, 0), 120.0 / 255.0);

        let ppm = dir.path().join("c.ppm");
        save_image(&img, &ppm, BitDepth::Eight).unwrap();
        assert_eq!(load_image(&ppm).unwrap(), img);
        let pgm = dir.path().join("g.pgm");
        save_image(&img.to_gray(), &pgm, BitDepth::Eight).unwrap();
        assert_eq!(load_image(&pgm).unwrap().channels(), 1);
    }

    #[test]
    fn missing_and_garbage_files_error() {
        let dir = tmp();
        assert!(matches!(load_image(dir.path().join("nope.png")), Err(Error::Io { .. })));
        let p = dir.path().join("bad.png");
        fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(load_image(&p).is_err());
        assert!(matches!(read_pfm(b"P5\n2 2\n-1\n"), Err(Error::Format(_))));
        assert!(matches!(read_pfm(b"Pf\n2 x\n-1\n"), Err(Error::Format(_))));
        assert!(matches!(read_pfm(b"Pf\n2 2\n-1\n\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn kitti_png16_convention() {
        let dir = tmp();
        let p = dir.path().join("d.png");
        let mut raw = vec![512u16; 64];
        raw[5] = 0;
        ImageBuffer::<Luma<u16>, _>::from_raw(8, 8, raw).unwrap().save(&p).unwrap();
        let d = load_disparity(&p, DisparityFormat::KittiPng16).unwrap();
        assert_eq!(d.get(0, 0), Some(2.0));
        assert_eq!(d.get(0, 5), None);
        assert_eq!(d.valid_count(), 63);

        let q = dir.path().join("e.png");
        save_disparity(&d, &q, DisparityFormat::KittiPng16).unwrap();
        assert_eq!(load_disparity(&q, DisparityFormat::KittiPng16).unwrap(), d);
    }

    #[test]
    fn pfm_rows_are_bottom_up_and_endianness_follows_scale() {
        // 2x2 big-endian (positive scale): first stored row is the bottom image row
        let mut bytes = b"Pf\n2 2\n1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, 2.0] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let d = read_pfm(&bytes).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0]);

        let mut le = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [3.0f32, 4.0, 1.0, f32::INFINITY] {
            le.extend_from_slice(&v.to_le_bytes());
        }
        let d = read_pfm(&le).unwrap();
        assert_eq!(d.get(0, 0), Some(1.0));
        assert_eq!(d.get(0, 1), None);
        assert_eq!(d.get(1, 1), Some(4.0));
    }

    #[test]
    fn full_scale_render_is_top_of_colormap() {
        let d = DisparityMap::filled(8, 8, 32.0);
        let rgb = render_rgb(&d, 32.0);
        let top = colormap::viridis(1.0);
        assert!(rgb.chunks(3).all(|px| px == top));
        let mut invalid = DisparityMap::from_fn(8, 8, |y, _| (y > 0).then_some(1.0));
        invalid = invalid.crop(0, 0, 8, 8).unwrap();
        let rgb = render_rgb(&invalid, 32.0);
        assert_eq!(&rgb[..3], &[0, 0, 0]);

        let dir = tmp();
        render_disparity(&d, dir.path().join("r.png"), 32.0).unwrap();
        let back = load_image(dir.path().join("r.png")).unwrap();
        assert_eq!(back.get(0, 4, 4), top[0] as f64 / 255.0);
    }
}
