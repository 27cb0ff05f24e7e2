//! Turns a folder of rectified high-resolution stereo pairs into an asymmetric dataset.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::{write_scene, Manifest, Split, StereoSample, MANIFEST_FILE};
use crate::degradation::DegradationTemplate;
use crate::error::{Error, Result};
use crate::imagecore::{load_disparity, load_image, DisparityFormat, DisparityMap, Image, MIN_SIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateOptions {
    pub name: String,
    pub split: Split,
    pub d_max: usize,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            name: "simulated".into(),
            split: Split::Train,
            d_max: 64,
        }
    }
}

fn find(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

struct SourceScene {
    id: String,
    left: Image,
    right: Image,
    disparity: Option<DisparityMap>,
}

fn read_scene(dir: &Path, id: &str, scale: usize) -> std::result::Result<SourceScene, String> {
    let images = ["png", "ppm", "pgm"];
    let left = find(dir, "left", &images).ok_or(format!("{id}: no left.png/ppm"))?;
    let right = find(dir, "right", &images).ok_or(format!("{id}: no right.png/ppm"))?;
    let left = load_image(&left).map_err(|e| format!("{id}: {e}"))?;
    let right = load_image(&right).map_err(|e| format!("{id}: {e}"))?;
    if !left.same_shape(&right) {
        return Err(format!(
            "{id}: views differ in size ({}x{} vs {}x{}), pair is not rectified",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        ));
    }
    let disparity = match find(dir, "disp", &["pfm", "png"]) {
        Some(p) => {
            let fmt = DisparityFormat::from_path(&p).map_err(|e| format!("{id}: {e}"))?;
            let d = load_disparity(&p, fmt).map_err(|e| format!("{id}: {e}"))?;
            if d.width() != left.width() || d.height() != left.height() {
                return Err(format!("{id}: disparity size differs from the views"));
            }
            Some(d)
        }
        None => None,
    };
    // drop the right/bottom remainder so the low-resolution grid is exact
    let (w, h) = (left.width() / scale * scale, left.height() / scale * scale);
    if w / scale < MIN_SIDE || h / scale < MIN_SIDE {
        return Err(format!("{id}: {}x{} is too small for scale {scale}", left.width(), left.height()));
    }
    let crop = |i: &Image| i.crop(0, 0, w, h).map_err(|e| format!("{id}: {e}"));
    Ok(SourceScene {
        id: id.to_string(),
        left: crop(&left)?,
        right: crop(&right)?,
        disparity: disparity.map(|d| d.crop(0, 0, w, h)).transpose().map_err(|e| format!("{id}: {e}"))?,
    })
}

/// Each subdirectory of `src_dir` is a scene holding `left` and `right` views
/// (PNG or PPM/PGM) and optionally `disp.pfm` or a KITTI-style `disp.png`.
/// Scenes are processed in name order and the `i`-th scene uses
/// `template.sample(i)`, so output is a pure function of inputs and seed.
pub fn simulate_dataset(
    src_dir: impl AsRef<Path>,
    template: &DegradationTemplate,
    out_dir: impl AsRef<Path>,
    opts: &SimulateOptions,
) -> Result<Manifest> {
    let (src, out) = (src_dir.as_ref(), out_dir.as_ref());
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Ingestion(vec![format!("{}: no scene directories", src.display())]));
    }
    let mut scenes = Vec::new();
    let mut offenders = Vec::new();
    for (id, dir) in &dirs {
        match read_scene(dir, id, template.scale) {
            Ok(s) => scenes.push(s),
            Err(e) => offenders.push(e),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Ingestion(offenders));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::new();
    for (i, s) in scenes.into_iter().enumerate() {
        let spec = template.sample(i as u64);
        let sample = StereoSample::simulate(s.id, &s.left, &s.right, s.disparity, &spec)?;
        info!("simulated {} ({})", sample.scene_id, spec.mode);
        entries.push(write_scene(out, &sample)?);
    }
    let manifest = Manifest {
        name: opts.name.clone(),
        split: opts.split,
        d_max: opts.d_max,
        root: out.to_path_buf(),
        scenes: entries,
    };
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{load_manifest, render_scene, LoadPolicy};
    use crate::degradation::DegradationMode;
    use crate::imagecore::{save_disparity, save_image, BitDepth, ColorSpace};

    fn write_source(dir: &Path, id: &str, w: usize, h: usize, seed: u64) {
        let d = dir.join(id);
        fs::create_dir_all(&d).unwrap();
        let s = render_scene(w, h, 16, seed).unwrap();
        save_image(&s.left, d.join("left.png"), BitDepth::Eight).unwrap();
        save_image(&s.right, d.join("right.png"), BitDepth::Eight).unwrap();
        save_disparity(&s.disparity, d.join("disp.pfm"), DisparityFormat::Pfm).unwrap();
    }

    #[test]
    fn simulation_is_deterministic_and_sized() {
        let src = tempfile::tempdir().unwrap();
        write_source(src.path(), "a", 128, 64, 1);
        write_source(src.path(), "b", 66, 64, 2);
        let template = DegradationTemplate::new(4, DegradationMode::AgJpeg, 11);
        let (o1, o2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = simulate_dataset(src.path(), &template, o1.path(), &SimulateOptions::default()).unwrap();
        let m2 = simulate_dataset(src.path(), &template, o2.path(), &SimulateOptions::default()).unwrap();
        assert_eq!(m1.to_tsv(), m2.to_tsv());
        for f in ["a/right_lr.png", "b/right_up.png", "a/disp_gt.pfm"] {
            assert_eq!(fs::read(o1.path().join(f)).unwrap(), fs::read(o2.path().join(f)).unwrap());
        }
        let (_, samples) = load_manifest(o1.path().join(MANIFEST_FILE), LoadPolicy::FailFast).unwrap();
        assert_eq!((samples[0].right_lr.width(), samples[0].right_lr.height()), (32, 16));
        assert_eq!(samples[1].width(), 64, "remainder columns dropped");
    }

    #[test]
    fn ingestion_errors_name_every_offender() {
        let src = tempfile::tempdir().unwrap();
        write_source(src.path(), "good", 64, 64, 1);
        let bad = src.path().join("mismatch");
        fs::create_dir_all(&bad).unwrap();
        save_image(&Image::filled(64, 64, ColorSpace::Rgb, 0.5), bad.join("left.png"), BitDepth::Eight).unwrap();
        save_image(&Image::filled(64, 60, ColorSpace::Rgb, 0.5), bad.join("right.png"), BitDepth::Eight).unwrap();
        fs::create_dir_all(src.path().join("empty")).unwrap();
        let out = tempfile::tempdir().unwrap();
        let err = simulate_dataset(src.path(), &DegradationTemplate::new(2, DegradationMode::Bic, 0), out.path(), &SimulateOptions::default())
            .unwrap_err();
        let Error::Ingestion(list) = err else { panic!("wrong error kind") };
        assert_eq!(list.len(), 2);
        assert!(list.iter().any(|m| m.starts_with("mismatch")));
        assert!(list.iter().any(|m| m.starts_with("empty")));
    }
}
