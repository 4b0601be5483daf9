//! `airseg`: phantom generation, preprocessing, training, inference,
//! evaluation and volumetric reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

#[derive(Debug, Parser)]
#[command(name = "airseg", version, about = "2.5D airway segmentation of chest CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic bifurcating phantoms (volume, mask, truth JSON).
    Phantom {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        phantom: PhantomFlags,
        /// Number of phantoms; phantom i uses seed + i.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Clip and normalize volumes, copy labels, write the slice manifest.
    Prep {
        #[command(flatten)]
        common: Common,
    },
    /// Train MEDSeg on a prepared directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment volumes with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A NIfTI file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// Keep every thresholded component.
        #[arg(long)]
        no_postprocess: bool,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
    },
    /// Volumetric statistics for a directory of masks.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask_dir: PathBuf,
    },
}

/// Flags mirroring the configuration keys.
#[derive(Debug, Args)]
struct Common {
    /// JSON configuration; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, visible_alias = "out")]
    out_dir: Option<PathBuf>,
    #[arg(long, visible_alias = "data")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    clip_min: Option<f32>,
    #[arg(long, allow_hyphen_values = true)]
    clip_max: Option<f32>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    connectivity: Option<u32>,
    #[arg(long)]
    bd_min_fraction: Option<f64>,
    /// Three comma-separated widths, e.g. 8,12,16.
    #[arg(long, value_delimiter = ',')]
    backbone_widths: Option<Vec<usize>>,
    #[arg(long)]
    bifpn_width: Option<usize>,
    #[arg(long)]
    bifpn_repeats: Option<usize>,
    #[arg(long)]
    head_width: Option<usize>,
    #[arg(long)]
    fusion_eps: Option<f64>,
}

#[derive(Debug, Args)]
struct PhantomFlags {
    #[arg(long)]
    depth: Option<usize>,
    /// Grid size x,y,z.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    spacing: Option<Vec<f64>>,
    /// Root segment start x,y,z in voxels.
    #[arg(long, value_delimiter = ',')]
    root_start: Option<Vec<f64>>,
    #[arg(long)]
    root_radius: Option<f64>,
    #[arg(long)]
    radius_decay: Option<f64>,
    #[arg(long)]
    segment_length: Option<f64>,
    #[arg(long)]
    length_decay: Option<f64>,
    #[arg(long)]
    half_angle_deg: Option<f64>,
    #[arg(long)]
    jitter_deg: Option<f64>,
    #[arg(long)]
    noise_level: Option<f64>,
}

fn put<T: serde::Serialize>(m: &mut Map<String, Value>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        m.insert(key.to_string(), json!(v));
    }
}

impl Common {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        put(&mut m, "out_dir", &self.out_dir);
        put(&mut m, "data_dir", &self.data_dir);
        put(&mut m, "seed", &self.seed);
        put(&mut m, "lr0", &self.lr0);
        put(&mut m, "lr_decay", &self.lr_decay);
        put(&mut m, "weight_decay", &self.weight_decay);
        put(&mut m, "epochs", &self.epochs);
        put(&mut m, "batch_size", &self.batch_size);
        put(&mut m, "crop_size", &self.crop_size);
        put(&mut m, "clip_min", &self.clip_min);
        put(&mut m, "clip_max", &self.clip_max);
        put(&mut m, "val_fraction", &self.val_fraction);
        put(&mut m, "threshold", &self.threshold);
        put(&mut m, "connectivity", &self.connectivity);
        put(&mut m, "bd_min_fraction", &self.bd_min_fraction);
        put(&mut m, "backbone_widths", &self.backbone_widths);
        put(&mut m, "bifpn_width", &self.bifpn_width);
        put(&mut m, "bifpn_repeats", &self.bifpn_repeats);
        put(&mut m, "head_width", &self.head_width);
        put(&mut m, "fusion_eps", &self.fusion_eps);
        m
    }

    fn resolve(&self, extra: Map<String, Value>) -> Result<config::RunConfig> {
        let mut flags = self.overrides();
        flags.extend(extra);
        config::resolve(self.config.as_deref(), flags)
    }
}

impl PhantomFlags {
    fn overrides(&self) -> Map<String, Value> {
        let mut p = Map::new();
        put(&mut p, "depth", &self.depth);
        put(&mut p, "dims", &self.dims);
        put(&mut p, "spacing", &self.spacing);
        put(&mut p, "root_start", &self.root_start);
        put(&mut p, "root_radius", &self.root_radius);
        put(&mut p, "radius_decay", &self.radius_decay);
        put(&mut p, "segment_length", &self.segment_length);
        put(&mut p, "length_decay", &self.length_decay);
        put(&mut p, "half_angle_deg", &self.half_angle_deg);
        put(&mut p, "jitter_deg", &self.jitter_deg);
        put(&mut p, "noise_level", &self.noise_level);
        let mut m = Map::new();
        if !p.is_empty() {
            m.insert("phantom".into(), Value::Object(p));
        }
        m
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("AIRSEG_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("AIRSEG_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Phantom { common, phantom, count } => {
            let cfg = common.resolve(phantom.overrides())?;
            commands::phantom(&cfg, count)
        }
        Command::Prep { common } => commands::prep(&common.resolve(Map::new())?),
        Command::Train { common, resume } => commands::train(&common.resolve(Map::new())?, resume.as_deref()),
        Command::Predict {
            common,
            checkpoint,
            input,
            no_postprocess,
        } => commands::predict(&common.resolve(Map::new())?, &checkpoint, &input, !no_postprocess),
        Command::Eval { common, pred_dir, gt_dir } => commands::eval(&common.resolve(Map::new())?, &pred_dir, &gt_dir),
        Command::Report { common, mask_dir } => commands::report(&common.resolve(Map::new())?, &mask_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
