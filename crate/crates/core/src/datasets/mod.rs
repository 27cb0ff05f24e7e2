//! Stereo samples, on-disk manifests, the synthetic benchmark and batching.

mod randomdot;
mod simulate;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::degradation::{degrade, upsample_bicubic, DegradationSpec};
use crate::error::{ensure_arg, Error, Result};
use crate::imagecore::{
    load_disparity, load_image, quantize_image, save_disparity, save_image, BitDepth, DisparityFormat, DisparityMap,
    Image,
};

pub use randomdot::{
    generate_random_dot_samples, make_random_dot_benchmark, render_scene, BenchmarkConfig, RandomDotScene,
};
pub use simulate::{simulate_dataset, SimulateOptions};

pub const LEFT_FILE: &str = "left.png";
pub const RIGHT_HR_FILE: &str = "right_hr.png";
pub const RIGHT_LR_FILE: &str = "right_lr.png";
pub const RIGHT_UP_FILE: &str = "right_up.png";
pub const DISP_FILE: &str = "disp_gt.pfm";
pub const SPEC_FILE: &str = "spec.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// One rectified scene: the high-resolution left view and the degraded right view.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub scene_id: String,
    pub left: Image,
    pub right_lr: Image,
    pub right_up: Image,
    /// High-resolution right view; only simulated data has it.
    pub right_hr: Option<Image>,
    pub gt_disparity: Option<DisparityMap>,
    pub spec: DegradationSpec,
}

impl StereoSample {
    /// Degrades `right_hr` and upsamples the result. Every image is rounded to
    /// 16-bit precision so the sample is identical to its saved-and-loaded form.
    pub fn simulate(
        scene_id: impl Into<String>,
        left: &Image,
        right_hr: &Image,
        gt_disparity: Option<DisparityMap>,
        spec: &DegradationSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let q = |img: &Image| quantize_image(img, BitDepth::Sixteen);
        let right_hr = q(right_hr);
        let right_lr = q(&degrade(&right_hr, spec)?);
        let right_up = q(&upsample_bicubic(&right_lr, spec.scale));
        let sample = StereoSample {
            scene_id: scene_id.into(),
            left: q(left),
            right_lr,
            right_up,
            right_hr: Some(right_hr),
            gt_disparity,
            spec: spec.clone(),
        };
        sample.check_shapes()?;
        Ok(sample)
    }

    pub fn width(&self) -> usize {
        self.left.width()
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn scale(&self) -> usize {
        self.spec.scale
    }

    pub fn check_shapes(&self) -> Result<()> {
        let s = self.spec.scale;
        ensure_arg!(self.left.same_shape(&self.right_up), "{}: left and upsampled right differ in shape", self.scene_id);
        ensure_arg!(
            self.right_lr.width() * s == self.width() && self.right_lr.height() * s == self.height(),
            "{}: low-resolution view is not 1/{} of the left view",
            self.scene_id,
            s
        );
        if let Some(hr) = &self.right_hr {
            ensure_arg!(self.left.same_shape(hr), "{}: left and right views differ in shape", self.scene_id);
        }
        if let Some(d) = &self.gt_disparity {
            ensure_arg!(
                d.width() == self.width() && d.height() == self.height(),
                "{}: disparity size differs from the left view",
                self.scene_id
            );
        }
        Ok(())
    }

    /// Re-runs the degradation on the high-resolution view and compares with the stored low-resolution view.
    pub fn verify_degradation(&self) -> Result<()> {
        let Some(hr) = &self.right_hr else {
            return Ok(());
        };
        let again = quantize_image(&degrade(hr, &self.spec)?, BitDepth::Sixteen);
        if again != self.right_lr {
            return Err(Error::Ingestion(vec![format!(
                "{}: stored low-resolution view does not match degrade(right_hr, spec)",
                self.scene_id
            )]));
        }
        Ok(())
    }

    /// Crops every view at once. Origin and size must be multiples of the scale
    /// so the low-resolution view is cropped on its own grid.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        let s = self.spec.scale;
        ensure_arg!(
            x0 % s == 0 && y0 % s == 0 && width % s == 0 && height % s == 0,
            "crop ({x0}, {y0}, {width}x{height}) is not aligned to scale {s}"
        );
        Ok(StereoSample {
            scene_id: self.scene_id.clone(),
            left: self.left.crop(x0, y0, width, height)?,
            right_lr: self.right_lr.crop(x0 / s, y0 / s, width / s, height / s)?,
            right_up: self.right_up.crop(x0, y0, width, height)?,
            right_hr: self.right_hr.as_ref().map(|i| i.crop(x0, y0, width, height)).transpose()?,
            gt_disparity: self.gt_disparity.as_ref().map(|d| d.crop(x0, y0, width, height)).transpose()?,
            spec: self.spec.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEntry {
    pub scene_id: String,
    pub left: PathBuf,
    pub right_lr: PathBuf,
    pub right_up: PathBuf,
    pub right_hr: Option<PathBuf>,
    pub disparity: Option<PathBuf>,
    pub spec: DegradationSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub split: Split,
    pub d_max: usize,
    pub root: PathBuf,
    pub scenes: Vec<SceneEntry>,
}

const COLUMNS: [&str; 7] = ["scene_id", "left", "right_lr", "right_up", "right_hr", "disp_gt", "spec"];

fn spec_inline(spec: &DegradationSpec) -> String {
    spec.to_key_values().to_text().lines().map(|l| l.replace(" = ", "=")).collect::<Vec<_>>().join(";")
}

fn spec_from_inline(text: &str) -> Result<DegradationSpec> {
    DegradationSpec::from_key_values(&KeyValues::parse(&text.replace(';', "\n"))?)
}

impl Manifest {
    /// Tab-separated index with `# key = value` header lines.
    pub fn to_tsv(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let mut out = format!("# name = {}\n# split = {}\n# d_max = {}\n{}\n", self.name, self.split, self.d_max, COLUMNS.join("\t"));
        for s in &self.scenes {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                s.scene_id,
                s.left.display(),
                s.right_lr.display(),
                s.right_up.display(),
                opt(&s.right_hr),
                opt(&s.disparity),
                spec_inline(&s.spec)
            ));
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let header: String = text
            .lines()
            .filter_map(|l| l.strip_prefix('#'))
            .map(|l| format!("{l}\n"))
            .collect();
        let kv = KeyValues::parse(&header)?;
        let mut rows = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        match rows.next() {
            Some(h) if h.split('\t').eq(COLUMNS) => {}
            _ => return Err(Error::Format("manifest: missing column header".into())),
        }
        let opt = |s: &str| (s != "-").then(|| PathBuf::from(s));
        let mut scenes = Vec::new();
        for (n, row) in rows.enumerate() {
            let f: Vec<&str> = row.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(Error::Format(format!("manifest row {}: expected {} columns", n + 1, COLUMNS.len())));
            }
            scenes.push(SceneEntry {
                scene_id: f[0].to_string(),
                left: f[1].into(),
                right_lr: f[2].into(),
                right_up: f[3].into(),
                right_hr: opt(f[4]),
                disparity: opt(f[5]),
                spec: spec_from_inline(f[6])?,
            });
        }
        Ok(Manifest {
            name: kv.require("name")?,
            split: kv.require::<String>("split")?.parse()?,
            d_max: kv.require("d_max")?,
            root: root.into(),
            scenes,
        })
    }

    /// Reads a manifest, or the manifest inside a dataset directory, and checks
    /// that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let joined;
        let mut path = path.as_ref();
        if path.is_dir() {
            joined = path.join(MANIFEST_FILE);
            path = &joined;
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Manifest::parse(&text, root)?;
        let missing: Vec<String> = m
            .scenes
            .iter()
            .flat_map(|s| {
                [Some(&s.left), Some(&s.right_lr), Some(&s.right_up), s.right_hr.as_ref(), s.disparity.as_ref()]
                    .into_iter()
                    .flatten()
                    .filter(|p| !m.root.join(p).is_file())
                    .map(|p| format!("{}: missing {}", s.scene_id, p.display()))
                    .collect::<Vec<_>>()
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::Ingestion(missing));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Keeps only the listed scenes, in the listed order.
    pub fn select(&self, scene_ids: &[&str]) -> Result<Self> {
        let scenes = scene_ids
            .iter()
            .map(|id| {
                self.scenes
                    .iter()
                    .find(|s| s.scene_id == *id)
                    .cloned()
                    .ok_or_else(|| Error::Argument(format!("scene {id:?} not in manifest")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { scenes, ..self.clone() })
    }
}

/// Writes the per-scene files and returns the manifest row.
pub(crate) fn write_scene(root: &Path, sample: &StereoSample) -> Result<SceneEntry> {
    let rel = PathBuf::from(&sample.scene_id);
    let dir = root.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let png = |img: &Image, name: &str| -> Result<PathBuf> {
        save_image(img, dir.join(name), BitDepth::Sixteen)?;
        Ok(rel.join(name))
    };
    let left = png(&sample.left, LEFT_FILE)?;
    let right_lr = png(&sample.right_lr, RIGHT_LR_FILE)?;
    let right_up = png(&sample.right_up, RIGHT_UP_FILE)?;
    let right_hr = sample.right_hr.as_ref().map(|i| png(i, RIGHT_HR_FILE)).transpose()?;
    let disparity = match &sample.gt_disparity {
        Some(d) => {
            save_disparity(d, dir.join(DISP_FILE), DisparityFormat::Pfm)?;
            Some(rel.join(DISP_FILE))
        }
        None => None,
    };
    let spec_path = dir.join(SPEC_FILE);
    fs::write(&spec_path, sample.spec.to_key_values().to_text()).map_err(|e| Error::io(&spec_path, e))?;
    Ok(SceneEntry {
        scene_id: sample.scene_id.clone(),
        left,
        right_lr,
        right_up,
        right_hr,
        disparity,
        spec: sample.spec.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadPolicy {
    FailFast,
    /// Drop broken scenes with a warning.
    Skip,
}

fn load_scene(root: &Path, e: &SceneEntry) -> Result<StereoSample> {
    let disparity = match &e.disparity {
        Some(p) => {
            let path = root.join(p);
            Some(load_disparity(&path, DisparityFormat::from_path(&path)?)?)
        }
        None => None,
    };
    let sample = StereoSample {
        scene_id: e.scene_id.clone(),
        left: load_image(root.join(&e.left))?,
        right_lr: load_image(root.join(&e.right_lr))?,
        right_up: load_image(root.join(&e.right_up))?,
        right_hr: e.right_hr.as_ref().map(|p| load_image(root.join(p))).transpose()?,
        gt_disparity: disparity,
        spec: e.spec.clone(),
    };
    sample.check_shapes()?;
    sample.verify_degradation()?;
    Ok(sample)
}

/// Loads every scene, re-verifying the degradation of simulated scenes.
pub fn load_samples(manifest: &Manifest, policy: LoadPolicy) -> Result<Vec<StereoSample>> {
    let mut samples = Vec::new();
    let mut problems = Vec::new();
    for e in &manifest.scenes {
        match load_scene(&manifest.root, e) {
            Ok(s) => samples.push(s),
            Err(err) => match policy {
                LoadPolicy::FailFast => problems.push(format!("{}: {err}", e.scene_id)),
                LoadPolicy::Skip => warn!("skipping scene {}: {err}", e.scene_id),
            },
        }
    }
    if !problems.is_empty() {
        return Err(Error::Ingestion(problems));
    }
    ensure_arg!(!samples.is_empty(), "manifest {} yielded no scenes", manifest.name);
    Ok(samples)
}

/// Manifest plus loaded samples in one call.
pub fn load_manifest(path: impl AsRef<Path>, policy: LoadPolicy) -> Result<(Manifest, Vec<StereoSample>)> {
    let m = Manifest::load(path)?;
    let samples = load_samples(&m, policy)?;
    Ok((m, samples))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub crop_width: usize,
    pub crop_height: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub samples: Vec<StereoSample>,
}

impl Batch {
    /// `(batch, height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let f = &self.samples[0].left;
        (self.samples.len(), f.height(), f.width(), f.channels())
    }
}

/// One epoch of shuffled, randomly cropped batches. The same seed and epoch
/// always give the same batches. Crops larger than a scene are clipped to it.
pub fn iterate_batches(samples: &[StereoSample], cfg: &BatchConfig, epoch: u64) -> Result<Vec<Batch>> {
    ensure_arg!(!samples.is_empty(), "no samples to batch");
    ensure_arg!(cfg.batch_size > 0, "batch_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let k = s.scale();
                    let cw = cfg.crop_width.min(s.width());
                    let ch = cfg.crop_height.min(s.height());
                    let x0 = k * rng.random_range(0..=(s.width() - cw) / k);
                    let y0 = k * rng.random_range(0..=(s.height() - ch) / k);
                    s.crop(x0, y0, cw, ch)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch { samples })
        })
        .collect()
}
