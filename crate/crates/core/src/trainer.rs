//! Adam training of the network, the four input/loss settings and the staged
//! self-boosting schedule.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::info;

use crate::autodiff::{Graph, Var};
use crate::config::KeyValues;
use crate::datasets::{iterate_batches, BatchConfig, StereoSample};
use crate::error::{ensure_arg, Error, Result};
use crate::imagecore::Image;
use crate::losses::{reconstruction_graph, smoothness_graph, smoothness_weights, total_graph, LossConfig};
use crate::geometry::pool_mask;
use crate::metrics::{end_point_error, three_pixel_error};
use crate::network::{extractor_graph, forward, forward_graph, save_checkpoint, NetworkConfig, NetworkParams, ParamSet};
use crate::tensor::Tensor;

/// Which right view feeds the network and which one the loss warps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    /// Asymmetric input, asymmetric loss.
    S1,
    /// Symmetric input, asymmetric loss.
    S2,
    /// Asymmetric input, symmetric loss.
    S3,
    /// Symmetric input, symmetric loss.
    S4,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" => Ok(Setting::S1),
            "S2" => Ok(Setting::S2),
            "S3" => Ok(Setting::S3),
            "S4" => Ok(Setting::S4),
            _ => Err(Error::Config(format!("unknown setting {s:?} (expected S1..S4)"))),
        }
    }
}

impl Setting {
    pub fn needs_high_resolution(self) -> bool {
        self != Setting::S1
    }
}

/// Images used for one sample: `input` feeds the network, `loss` is warped and compared.
#[derive(Clone, Copy, Debug)]
pub struct ConfiguredPair<'a> {
    pub input: (&'a Image, &'a Image),
    pub loss: (&'a Image, &'a Image),
}

pub fn configure_ablation(setting: Setting, sample: &StereoSample) -> Result<ConfiguredPair<'_>> {
    let up = (&sample.left, &sample.right_up);
    let hr = || {
        sample
            .right_hr
            .as_ref()
            .map(|r| (&sample.left, r))
            .ok_or_else(|| Error::Argument(format!("setting {setting} needs the high-resolution right view of {}", sample.scene_id)))
    };
    Ok(match setting {
        Setting::S1 => ConfiguredPair { input: up, loss: up },
        Setting::S2 => ConfiguredPair { input: hr()?, loss: up },
        Setting::S3 => ConfiguredPair { input: up, loss: hr()? },
        Setting::S4 => ConfiguredPair { input: hr()?, loss: hr()? },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub crop_width: usize,
    pub crop_height: usize,
    pub seed: u64,
    /// Number of boosting stages after stage 0.
    pub stages: usize,
    pub loss: LossConfig,
    pub setting: Setting,
    /// Stop a stage once training loss improved by less than 0.5% over 3 epochs.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs_per_stage: 30,
            batch_size: 2,
            crop_width: 256,
            crop_height: 128,
            seed: 0,
            stages: 3,
            loss: LossConfig::default(),
            setting: Setting::S1,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 16] = [
        "learning_rate",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "epochs_per_stage",
        "batch_size",
        "crop_width",
        "crop_height",
        "seed",
        "stages",
        "alpha",
        "lambda",
        "ssim_window",
        "use_warp_mask",
        "setting",
        "early_stop",
    ];

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.learning_rate > 0.0, "learning_rate must be positive");
        ensure_arg!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure_arg!(self.batch_size > 0, "batch_size must be positive");
        ensure_arg!(self.crop_width > 0 && self.crop_height > 0, "crop size must be positive");
        self.loss.validate()
    }

    /// Overrides fields present in `kv`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = kv.get(stringify!($f))? { self.$f = v; }
            )*};
        }
        take!(learning_rate, adam_beta1, adam_beta2, adam_eps, epochs_per_stage, batch_size, crop_width, crop_height, seed, stages, early_stop);
        if let Some(v) = kv.get("alpha")? {
            self.loss.alpha = v;
        }
        if let Some(v) = kv.get("lambda")? {
            self.loss.lambda = v;
        }
        if let Some(v) = kv.get("ssim_window")? {
            self.loss.ssim_window = v;
        }
        if let Some(v) = kv.get("use_warp_mask")? {
            self.loss.use_warp_mask = v;
        }
        if let Some(v) = kv.get::<String>("setting")? {
            self.setting = v.parse()?;
        }
        self.validate()
    }
}

/// Adam with bias correction over a flat list of tensors.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[&[usize]], cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Option<Tensor>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_epe: Option<f64>,
    pub val_3pe: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StageState {
    pub k: usize,
    /// Parameters at the end of the stage.
    pub params: NetworkParams,
    /// Extractor defining the feature-metric loss; absent at stage 0.
    pub frozen_loss_extractor: Option<ParamSet>,
    pub history: Vec<EpochRecord>,
    /// Parameters after the epoch with the lowest validation EPE, when validation data was given.
    pub best_val: Option<(usize, NetworkParams)>,
}

/// Loss of one sample on the tape. `frozen` switches the data term from
/// photometric to feature-metric.
fn sample_loss(
    g: &mut Graph,
    cfg: &NetworkConfig,
    fp: &[Var],
    mp: &[Var],
    frozen: Option<&[Var]>,
    pair: &ConfiguredPair,
    loss: &LossConfig,
) -> Result<Var> {
    let l_in = g.constant(pair.input.0.to_tensor());
    let r_in = g.constant(pair.input.1.to_tensor());
    let out = forward_graph(g, cfg, fp, mp, l_in, r_in);
    let l_loss = g.constant(pair.loss.0.to_tensor());
    let r_loss = g.constant(pair.loss.1.to_tensor());
    let warped = g.warp(r_loss, out.disparity);
    let full_mask = g.warp_mask(warped).expect("warp node").to_vec();
    let data = match frozen {
        None => {
            let mask = loss.use_warp_mask.then_some(full_mask.as_slice());
            reconstruction_graph(g, l_loss, warped, mask, loss)?
        }
        Some(ext) => {
            let f_left = extractor_graph(g, cfg, ext, l_loss);
            let f_warped = extractor_graph(g, cfg, ext, warped);
            let s = cfg.feature_stride;
            let (w, h) = (pair.loss.0.width(), pair.loss.0.height());
            let mask = loss.use_warp_mask.then(|| pool_mask(&full_mask, w, h, s));
            reconstruction_graph(g, f_left, f_warped, mask.as_deref(), loss)?
        }
    };
    let smooth = smoothness_graph(g, out.disparity, smoothness_weights(pair.loss.0, None));
    Ok(total_graph(g, data, smooth, loss))
}

/// Mean loss over `samples` and its gradient with respect to every trainable parameter,
/// extractor first, then matcher.
pub fn loss_and_gradients(
    params: &NetworkParams,
    frozen: Option<&ParamSet>,
    samples: &[StereoSample],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    ensure_arg!(!samples.is_empty(), "empty batch");
    let mut g = Graph::new();
    let fp = params.extractor.bind(&mut g, true);
    let mp = params.matcher.bind(&mut g, true);
    let frozen_vars = frozen.map(|f| f.bind(&mut g, false));
    let mut terms = Vec::with_capacity(samples.len());
    for s in samples {
        let pair = configure_ablation(cfg.setting, s)?;
        terms.push(sample_loss(&mut g, &params.config, &fp, &mp, frozen_vars.as_deref(), &pair, &cfg.loss)?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    let total = g.scale(total, 1.0 / samples.len() as f64);
    g.backward(total);
    let grads = fp.iter().chain(&mp).map(|v| g.grad(*v).cloned()).collect();
    Ok((g.value(total).item(), grads))
}

/// Loss without gradients.
pub fn evaluate_loss(params: &NetworkParams, frozen: Option<&ParamSet>, samples: &[StereoSample], cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let fp = params.extractor.bind(&mut g, false);
    let mp = params.matcher.bind(&mut g, false);
    let frozen_vars = frozen.map(|f| f.bind(&mut g, false));
    let mut acc = 0.0;
    for s in samples {
        let pair = configure_ablation(cfg.setting, s)?;
        let l = sample_loss(&mut g, &params.config, &fp, &mp, frozen_vars.as_deref(), &pair, &cfg.loss)?;
        acc += g.value(l).item();
    }
    Ok(acc / samples.len() as f64)
}

/// Per-scene `(scene_id, 3PE, EPE)` of full-image predictions from the setting's input pair.
pub fn evaluate_samples(params: &NetworkParams, samples: &[StereoSample], setting: Setting) -> Result<Vec<(String, f64, f64)>> {
    samples
        .iter()
        .map(|s| {
            let gt = s
                .gt_disparity
                .as_ref()
                .ok_or_else(|| Error::Argument(format!("{}: no ground truth", s.scene_id)))?;
            let pair = configure_ablation(setting, s)?;
            let pred = forward(pair.input.0, pair.input.1, params)?.disparity;
            Ok((s.scene_id.clone(), three_pixel_error(&pred, gt)?, end_point_error(&pred, gt)?))
        })
        .collect()
}

fn mean_metrics(rows: &[(String, f64, f64)]) -> (f64, f64) {
    let n = rows.len() as f64;
    (rows.iter().map(|r| r.1).sum::<f64>() / n, rows.iter().map(|r| r.2).sum::<f64>() / n)
}

/// One stage of Adam on the total loss. `loss_extractor`, when given, defines
/// the feature-metric data term and is never updated.
pub fn train_stage(
    init: &NetworkParams,
    loss_extractor: Option<&ParamSet>,
    data: &[StereoSample],
    val: &[StereoSample],
    cfg: &TrainConfig,
    k: usize,
) -> Result<StageState> {
    cfg.validate()?;
    ensure_arg!(!data.is_empty(), "training data is empty");
    let mut params = init.clone();
    let shapes: Vec<&[usize]> = init.extractor.tensors().chain(init.matcher.tensors()).map(Tensor::shape).collect();
    let mut adam = Adam::new(&shapes, cfg);
    let batch_cfg = BatchConfig {
        batch_size: cfg.batch_size,
        crop_width: cfg.crop_width,
        crop_height: cfg.crop_height,
        seed: cfg.seed ^ (k as u64).wrapping_mul(0xA076_1D64_78BD_642F),
    };
    let mut history = Vec::new();
    let mut best_val: Option<(usize, NetworkParams, f64)> = None;
    for epoch in 0..cfg.epochs_per_stage {
        let mut epoch_loss = 0.0;
        let batches = iterate_batches(data, &batch_cfg, epoch as u64)?;
        for (step, batch) in batches.iter().enumerate() {
            let (loss, grads) = loss_and_gradients(&params, loss_extractor, &batch.samples, cfg)?;
            let bad_grad = grads.iter().flatten().any(|g| !g.all_finite());
            if !loss.is_finite() || bad_grad {
                return Err(Error::NonFinite {
                    stage: k,
                    epoch,
                    step,
                    detail: format!(
                        "loss {loss}, non-finite gradient: {bad_grad}, scenes {:?}",
                        batch.samples.iter().map(|s| s.scene_id.as_str()).collect::<Vec<_>>()
                    ),
                });
            }
            epoch_loss += loss;
            adam.step(params.extractor.tensors_mut().chain(params.matcher.tensors_mut()), &grads);
        }
        let train_loss = epoch_loss / batches.len() as f64;
        let (val_3pe, val_epe) = if val.is_empty() {
            (None, None)
        } else {
            let (tpe, epe) = mean_metrics(&evaluate_samples(&params, val, cfg.setting)?);
            if best_val.as_ref().is_none_or(|b| epe < b.2) {
                best_val = Some((epoch, params.clone(), epe));
            }
            (Some(tpe), Some(epe))
        };
        info!("stage {k} epoch {epoch}: loss {train_loss:.5} val EPE {val_epe:?}");
        history.push(EpochRecord { epoch, train_loss, val_epe, val_3pe });
        if cfg.early_stop && history.len() > 3 {
            let before = history[history.len() - 4].train_loss;
            if (before - train_loss) / before.abs().max(f64::MIN_POSITIVE) < 0.005 {
                info!("stage {k}: early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(StageState {
        k,
        params,
        frozen_loss_extractor: loss_extractor.cloned(),
        history,
        best_val: best_val.map(|(e, p, _)| (e, p)),
    })
}

pub const LOG_HEADER: &str = "stage\tepoch\ttrain_loss\tval_epe\tval_3pe";

fn log_rows(state: &StageState) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    state
        .history
        .iter()
        .map(|r| format!("{}\t{}\t{:.6}\t{}\t{}\n", state.k, r.epoch, r.train_loss, opt(r.val_epe), opt(r.val_3pe)))
        .collect()
}

/// Stage 0 with the photometric loss, then `cfg.stages` stages, each started
/// from the previous network and trained with the feature-metric loss defined
/// by the previous (frozen) extractor. With `out_dir`, writes `stage_k.ckpt`,
/// `stage_k_best.ckpt` when validation data exists, and `train_log.tsv`.
pub fn self_boost(
    net: &NetworkConfig,
    data: &[StereoSample],
    val: &[StereoSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<StageState>> {
    ensure_arg!(cfg.stages >= 1, "self-boosting needs at least one boosting stage");
    let init = NetworkParams::init(net)?;
    self_boost_from(&init, data, val, cfg, out_dir)
}

pub fn self_boost_from(
    init: &NetworkParams,
    data: &[StereoSample],
    val: &[StereoSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<StageState>> {
    let log_path = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.tsv");
            fs::write(&p, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };
    let mut states: Vec<StageState> = Vec::with_capacity(cfg.stages + 1);
    for k in 0..=cfg.stages {
        let (start, frozen) = match states.last() {
            None => (init.clone(), None),
            Some(prev) => (prev.params.clone(), Some(prev.params.extractor.clone())),
        };
        let state = train_stage(&start, frozen.as_ref(), data, val, cfg, k)?;
        if let (Some(dir), Some(log)) = (out_dir, &log_path) {
            save_checkpoint(&state.params, dir.join(format!("stage_{k}.ckpt")))?;
            if let Some((_, best)) = &state.best_val {
                save_checkpoint(best, dir.join(format!("stage_{k}_best.ckpt")))?;
            }
            let mut f = OpenOptions::new().append(true).open(log).map_err(|e| Error::io(log, e))?;
            f.write_all(log_rows(&state).as_bytes()).map_err(|e| Error::io(log, e))?;
        }
        states.push(state);
    }
    Ok(states)
}
