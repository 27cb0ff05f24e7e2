//! Procedural benchmark: fronto-parallel rectangles over a slanted background
//! plane, each layer carrying its own multi-scale value-noise texture. The
//! right view is rendered exactly from the same surfaces.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{write_scene, Manifest, Split, StereoSample, MANIFEST_FILE};
use crate::degradation::{DegradationMode, DegradationTemplate};
use crate::error::{ensure_arg, Error, Result};
use crate::imagecore::{ColorSpace, DisparityMap, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub name: String,
    pub split: Split,
    pub n_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub d_max: usize,
    pub scale: usize,
    pub mode: DegradationMode,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            name: "random-dot".into(),
            split: Split::Train,
            n_scenes: 20,
            width: 256,
            height: 128,
            d_max: 32,
            scale: 4,
            mode: DegradationMode::Bic,
            seed: 0,
        }
    }
}

/// A rendered scene before degradation.
#[derive(Clone, Debug)]
pub struct RandomDotScene {
    pub left: Image,
    pub right: Image,
    pub disparity: DisparityMap,
    /// Left pixels whose match is visible in the right view on both bilinear taps.
    pub non_occluded: Vec<bool>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lattice value in `[-1, 1]`.
fn lattice(key: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(key ^ splitmix((ix as u64).wrapping_mul(0x632B_E59B_D9B4_E019) ^ (iy as u64)));
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn bspline(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        (1.0 - t).powi(3) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Cubic B-spline interpolation of hashed lattice values.
fn value_noise(key: u64, u: f64, v: f64) -> f64 {
    let (bu, bv) = (u.floor(), v.floor());
    let (wu, wv) = (bspline(u - bu), bspline(v - bv));
    let (iu, iv) = (bu as i64 - 1, bv as i64 - 1);
    let mut acc = 0.0;
    for (j, wy) in wv.iter().enumerate() {
        let mut row = 0.0;
        for (i, wx) in wu.iter().enumerate() {
            row += wx * lattice(key, iu + i as i64, iv + j as i64);
        }
        acc += wy * row;
    }
    acc
}

const OCTAVES: [(f64, f64); 3] = [(2.5, 0.8), (5.0, 1.0), (10.0, 1.0)];
const TEXTURE_GAIN: f64 = 2.5;

struct Texture {
    key: u64,
    tint: [f64; 3],
}

impl Texture {
    fn new(key: u64, rng: &mut ChaCha8Rng) -> Self {
        Texture {
            key,
            tint: [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
        }
    }

    fn field(&self, f: u64, u: f64, v: f64) -> f64 {
        OCTAVES
            .iter()
            .enumerate()
            .map(|(o, (spacing, amp))| amp * value_noise(splitmix(self.key ^ (f << 8) ^ o as u64), u / spacing, v / spacing))
            .sum()
    }

    fn rgb(&self, u: f64, v: f64) -> [f64; 3] {
        let lum = self.field(0, u, v);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let chroma = self.field(1 + c as u64, u, v);
            *o = 0.5 + 0.5 * (TEXTURE_GAIN * (lum + 0.4 * chroma) + self.tint[c]).tanh();
        }
        out
    }
}

struct Rect {
    x0: f64,
    x1: f64,
    y0: usize,
    y1: usize,
    d: f64,
}

struct Layout {
    /// background disparity `a + b x + c y` in left coordinates
    plane: (f64, f64, f64),
    /// sorted by increasing disparity, so later rectangles are in front
    rects: Vec<Rect>,
    textures: Vec<Texture>,
}

impl Layout {
    fn random(w: usize, h: usize, d_max: f64, rng: &mut ChaCha8Rng) -> Self {
        let bg_max = 0.35 * d_max;
        let centre = rng.random_range(0.3 * bg_max..0.7 * bg_max);
        let budget = centre.min(bg_max - centre);
        let share = rng.random_range(0.0..1.0);
        let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let b = sign(rng) * share * budget / ((w - 1) as f64 / 2.0);
        let c = sign(rng) * (1.0 - share) * budget / ((h - 1) as f64 / 2.0);
        let a = centre - b * (w - 1) as f64 / 2.0 - c * (h - 1) as f64 / 2.0;

        let n = rng.random_range(2..=4);
        let mut rects: Vec<Rect> = (0..n)
            .map(|_| {
                let rw = rng.random_range(w / 8..=w / 3) as f64;
                let rh = rng.random_range(h / 6..=h / 2);
                let x0 = rng.random_range(0.0..(w as f64 - rw));
                let y0 = rng.random_range(0..=h - rh);
                Rect {
                    x0,
                    x1: x0 + rw,
                    y0,
                    y1: y0 + rh,
                    d: rng.random_range(0.4 * d_max..=d_max),
                }
            })
            .collect();
        rects.sort_by(|p, q| p.d.total_cmp(&q.d));
        let textures = (0..=n).map(|_| Texture::new(rng.random(), rng)).collect();
        Layout { plane: (a, b, c), rects, textures }
    }

    fn background(&self, x: f64, y: f64) -> f64 {
        let (a, b, c) = self.plane;
        a + b * x + c * y
    }

    /// Frontmost layer covering left pixel `(x, y)`: 0 is the background, `k` is rectangle `k - 1`.
    fn left_layer(&self, x: f64, y: usize) -> (usize, f64) {
        for (k, r) in self.rects.iter().enumerate().rev() {
            if y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1 {
                return (k + 1, r.d);
            }
        }
        (0, self.background(x, y as f64))
    }

    /// Frontmost surface seen by right pixel `(xr, y)`: layer and left-view x coordinate.
    fn right_layer(&self, xr: f64, y: usize) -> (usize, f64) {
        for (k, r) in self.rects.iter().enumerate().rev() {
            let xl = xr + r.d;
            if y >= r.y0 && y < r.y1 && xl >= r.x0 && xl < r.x1 {
                return (k + 1, xl);
            }
        }
        let (a, b, c) = self.plane;
        (0, (xr + a + c * y as f64) / (1.0 - b))
    }
}

fn image_from_rows(w: usize, h: usize, px: &[[f64; 3]]) -> Image {
    Image::from_fn(w, h, ColorSpace::Rgb, |c, y, x| px[y * w + x][c])
}

/// Renders one scene; the same seed always gives the same scene.
pub fn render_scene(width: usize, height: usize, d_max: usize, seed: u64) -> Result<RandomDotScene> {
    ensure_arg!(width >= 64 && height >= 64, "benchmark scenes must be at least 64x64");
    ensure_arg!(d_max >= 1 && d_max < width / 2, "d_max must lie in [1, width/2)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::random(width, height, d_max as f64, &mut rng);

    let mut left = Vec::with_capacity(width * height);
    let mut disp = Vec::with_capacity(width * height);
    let mut left_ids = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (k, d) = layout.left_layer(x as f64, y);
            left.push(layout.textures[k].rgb(x as f64, y as f64));
            disp.push(d as f32);
            left_ids.push(k);
        }
    }
    let mut right = Vec::with_capacity(width * height);
    let mut right_ids = Vec::with_capacity(width * height);
    for y in 0..height {
        for xr in 0..width {
            let (k, xl) = layout.right_layer(xr as f64, y);
            right.push(layout.textures[k].rgb(xl, y as f64));
            right_ids.push(k);
        }
    }
    let non_occluded = (0..width * height)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            let xr = x as f64 - disp[i] as f64;
            if xr < 0.0 || xr > (width - 1) as f64 {
                return false;
            }
            let x0 = (xr.floor() as usize).min(width - 2);
            let k = left_ids[i];
            right_ids[y * width + x0] == k && right_ids[y * width + x0 + 1] == k
        })
        .collect();
    Ok(RandomDotScene {
        left: image_from_rows(width, height, &left),
        right: image_from_rows(width, height, &right),
        disparity: DisparityMap::from_values(width, height, disp)?,
        non_occluded,
    })
}

fn scene_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64 + 1))
}

/// The benchmark in memory, identical to what [`make_random_dot_benchmark`] writes.
pub fn generate_random_dot_samples(cfg: &BenchmarkConfig) -> Result<Vec<StereoSample>> {
    ensure_arg!(cfg.n_scenes > 0, "benchmark needs at least one scene");
    ensure_arg!(
        cfg.width % cfg.scale == 0 && cfg.height % cfg.scale == 0,
        "benchmark size must be divisible by the scale"
    );
    let template = DegradationTemplate::new(cfg.scale, cfg.mode, cfg.seed);
    (0..cfg.n_scenes)
        .map(|i| {
            let scene = render_scene(cfg.width, cfg.height, cfg.d_max, scene_seed(cfg.seed, i))?;
            StereoSample::simulate(
                format!("scene_{i:04}"),
                &scene.left,
                &scene.right,
                Some(scene.disparity),
                &template.sample(i as u64),
            )
        })
        .collect()
}

/// Writes the benchmark under `out_dir` with a `manifest.tsv` index.
pub fn make_random_dot_benchmark(cfg: &BenchmarkConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scenes = generate_random_dot_samples(cfg)?
        .iter()
        .map(|s| write_scene(out, s))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        name: cfg.name.clone(),
        split: cfg.split,
        d_max: cfg.d_max,
        root: out.to_path_buf(),
        scenes,
    };
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
