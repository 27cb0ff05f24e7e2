use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asym_stereo::config::KeyValues;
use asym_stereo::datasets::{
    load_manifest, make_random_dot_benchmark, simulate_dataset, BenchmarkConfig, LoadPolicy, SimulateOptions, Split,
};
use asym_stereo::degradation::{upsample_bicubic, DegradationMode, DegradationTemplate};
use asym_stereo::diagnostics::{evaluate_space_over, FeatureSpace, SpaceReport};
use asym_stereo::imagecore::{load_disparity, load_image, render_disparity, save_disparity, DisparityFormat};
use asym_stereo::network::{forward, load_checkpoint, NetworkConfig};
use asym_stereo::trainer::{evaluate_samples, self_boost, Setting, TrainConfig};
use asym_stereo::{Error, Result};

#[derive(Parser)]
#[command(name = "asym-stereo", version, about = "Unsupervised stereo matching for resolution-asymmetric pairs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade the right views of a folder of high-resolution stereo pairs.
    #[command(rename_all = "snake_case")]
    Simulate {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value = "BIC")]
        mode: DegradationMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "simulated")]
        name: String,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 64)]
        d_max: usize,
    },
    /// Generate the synthetic random-dot benchmark.
    #[command(name = "make-bench", rename_all = "snake_case")]
    MakeBench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_scenes: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        d_max: usize,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value = "BIC")]
        mode: DegradationMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value = "random-dot")]
        name: String,
    },
    /// Self-boosting training; writes stage_k.ckpt and train_log.tsv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        keys: TrainKeys,
    },
    /// Per-scene and mean 3PE/EPE of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "S1")]
        setting: Setting,
    },
    /// Feature-space PSNR and WTA 3PE for the image space and each checkpoint.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Colour-map a disparity file, or predict one from a stereo pair first.
    /// A low-resolution right view is upsampled to the left view's size.
    #[command(rename_all = "snake_case")]
    Render {
        #[arg(long, conflicts_with_all = ["checkpoint", "left", "right"])]
        disparity: Option<PathBuf>,
        #[arg(long, requires_all = ["left", "right"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        left: Option<PathBuf>,
        #[arg(long)]
        right: Option<PathBuf>,
        /// PNG output.
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw prediction as PFM.
        #[arg(long)]
        pfm: Option<PathBuf>,
        #[arg(long)]
        d_max: Option<f32>,
    },
}

/// Each flag is the config key of the same name.
#[derive(Args)]
#[command(rename_all = "snake_case")]
struct TrainKeys {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    adam_beta1: Option<String>,
    #[arg(long)]
    adam_beta2: Option<String>,
    #[arg(long)]
    adam_eps: Option<String>,
    #[arg(long)]
    epochs_per_stage: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    crop_width: Option<String>,
    #[arg(long)]
    crop_height: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    ssim_window: Option<String>,
    #[arg(long)]
    use_warp_mask: Option<String>,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    early_stop: Option<String>,
    #[arg(long)]
    in_channels: Option<String>,
    #[arg(long)]
    feature_channels: Option<String>,
    #[arg(long)]
    feature_stride: Option<String>,
    #[arg(long)]
    num_extractor_blocks: Option<String>,
    #[arg(long)]
    matching_channels: Option<String>,
    #[arg(long)]
    d_max: Option<String>,
    #[arg(long)]
    init_seed: Option<String>,
    #[arg(long)]
    norm_groups: Option<String>,
}

impl TrainKeys {
    fn key_values(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::parse(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
            None => KeyValues::new(),
        };
        let flags = [
            ("learning_rate", &self.learning_rate),
            ("adam_beta1", &self.adam_beta1),
            ("adam_beta2", &self.adam_beta2),
            ("adam_eps", &self.adam_eps),
            ("epochs_per_stage", &self.epochs_per_stage),
            ("batch_size", &self.batch_size),
            ("crop_width", &self.crop_width),
            ("crop_height", &self.crop_height),
            ("seed", &self.seed),
            ("stages", &self.stages),
            ("alpha", &self.alpha),
            ("lambda", &self.lambda),
            ("ssim_window", &self.ssim_window),
            ("use_warp_mask", &self.use_warp_mask),
            ("setting", &self.setting),
            ("early_stop", &self.early_stop),
            ("in_channels", &self.in_channels),
            ("feature_channels", &self.feature_channels),
            ("feature_stride", &self.feature_stride),
            ("num_extractor_blocks", &self.num_extractor_blocks),
            ("matching_channels", &self.matching_channels),
            ("d_max", &self.d_max),
            ("init_seed", &self.init_seed),
            ("norm_groups", &self.norm_groups),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                kv.set(k, v);
            }
        }
        let known: Vec<&str> = TrainConfig::KEYS.iter().chain(NetworkConfig::KEYS.iter()).copied().collect();
        kv.check_known(&known)?;
        Ok(kv)
    }
}

fn load(path: &Path) -> Result<Vec<asym_stereo::datasets::StereoSample>> {
    Ok(load_manifest(path, LoadPolicy::FailFast)?.1)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { src, out, scale, mode, seed, name, split, d_max } => {
            let template = DegradationTemplate::new(scale, mode, seed);
            let m = simulate_dataset(&src, &template, &out, &SimulateOptions { name, split, d_max })?;
            println!("wrote {} scenes to {}", m.scenes.len(), out.display());
        }
        Command::MakeBench { out, n_scenes, width, height, d_max, scale, mode, seed, split, name } => {
            let cfg = BenchmarkConfig { name, split, n_scenes, width, height, d_max, scale, mode, seed };
            let m = make_random_dot_benchmark(&cfg, &out)?;
            println!("wrote {} scenes to {}", m.scenes.len(), out.display());
        }
        Command::Train { data, val, out, keys } => {
            let kv = keys.key_values()?;
            let mut net = NetworkConfig::default();
            net.apply(&kv)?;
            let mut cfg = TrainConfig::default();
            cfg.apply(&kv)?;
            let (manifest, train) = load_manifest(&data, LoadPolicy::FailFast)?;
            if kv.get_str("d_max").is_none() {
                net = net.covering(manifest.d_max);
            }
            let val = val.as_deref().map(load).transpose()?.unwrap_or_default();
            let states = self_boost(&net, &train, &val, &cfg, Some(&out))?;
            for s in &states {
                let last = s.history.last();
                println!("stage {}\tloss {:.5}", s.k, last.map_or(f64::NAN, |r| r.train_loss));
            }
        }
        Command::Eval { checkpoint, data, setting } => {
            let params = load_checkpoint(&checkpoint)?;
            let rows = evaluate_samples(&params, &load(&data)?, setting)?;
            println!("scene\t3pe_percent\tepe_px");
            for (id, tpe, epe) in &rows {
                println!("{id}\t{tpe:.4}\t{epe:.4}");
            }
            let n = rows.len() as f64;
            let tpe = rows.iter().map(|r| r.1).sum::<f64>() / n;
            let epe = rows.iter().map(|r| r.2).sum::<f64>() / n;
            println!("mean\t{tpe:.4}\t{epe:.4}");
        }
        Command::Diagnose { data, checkpoints } => {
            let (manifest, samples) = load_manifest(&data, LoadPolicy::FailFast)?;
            println!("{}", SpaceReport::TSV_HEADER);
            let print = |space: &FeatureSpace| -> Result<()> {
                let (rows, mean) = evaluate_space_over(space, &samples, manifest.d_max)?;
                for r in rows.iter().chain([&mean]) {
                    println!("{r}");
                }
                Ok(())
            };
            print(&FeatureSpace::Image)?;
            for c in &checkpoints {
                let params = load_checkpoint(c)?;
                print(&FeatureSpace::Network {
                    label: c.display().to_string(),
                    config: &params.config,
                    extractor: &params.extractor,
                })?;
            }
        }
        Command::Render { disparity, checkpoint, left, right, out, pfm, d_max } => {
            let (d, default_max) = match (disparity, checkpoint, left, right) {
                (Some(p), ..) => (load_disparity(&p, DisparityFormat::from_path(&p)?)?, None),
                (None, Some(c), Some(l), Some(r)) => {
                    let params = load_checkpoint(&c)?;
                    let (left, mut right) = (load_image(&l)?, load_image(&r)?);
                    if right.width() < left.width() && left.width() % right.width() == 0 {
                        right = upsample_bicubic(&right, left.width() / right.width());
                    }
                    let pred = forward(&left, &right, &params)?;
                    (pred.disparity, Some(params.config.d_max as f32))
                }
                _ => return Err(Error::Argument("give --disparity, or --checkpoint with --left and --right".into())),
            };
            let top = d_max.or(default_max).or(d.max_valid()).unwrap_or(1.0).max(f32::MIN_POSITIVE);
            render_disparity(&d, &out, top)?;
            if let Some(p) = pfm {
                save_disparity(&d, &p, DisparityFormat::Pfm)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
