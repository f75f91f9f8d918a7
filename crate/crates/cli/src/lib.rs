//! The `flamesplat` pipeline as a command-line tool. Each subcommand is one
//! stage; stages communicate only through files in the work directory.

pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flamesplat::synth::MotionModel;

use crate::config::{PipelineConfig, ShutterChoice};
use crate::error::{invalid, CliError};
use crate::stages::{Context, RenderArgs, SynthOverrides};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "FLAMESPLAT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "flamesplat", version, about = "Dynamic Gaussian reconstruction of flames from few views")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Pipeline configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides the config).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Work directory for stage outputs (overrides the config).
    #[arg(long, short = 'o', global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hold out every n-th frame for evaluation; 0 keeps all frames.
    #[arg(long, global = true)]
    pub holdout_every: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub shutter: Option<ShutterChoice>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MotionArg {
    Rigid,
    Plume,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset into the output directory.
    SynthGenerate {
        #[arg(long, value_enum)]
        motion: Option<MotionArg>,
        /// Paint an LED sync board into the frames.
        #[arg(long)]
        led: bool,
        /// Rolling-shutter line time in seconds.
        #[arg(long)]
        line_time: Option<f64>,
    },
    /// Background images and dynamic masks per camera.
    RemoveFire {
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Align monocular depth to the sparse stereo depth.
    AlignDepth,
    /// Fuse the aligned depth maps into a colored point cloud.
    FusePointcloud {
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Fuse per-camera optical flow into voxel scene flow.
    FuseFlow {
        #[arg(long)]
        alpha0: Option<f64>,
    },
    /// Static Gaussians from the point cloud, dynamic ones from voxel flow.
    InitGaussians,
    /// Fit the static Gaussians to background images and depth.
    FitStatic {
        #[arg(long)]
        iters: Option<usize>,
        /// Input scene (defaults to init.ply in the work directory).
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Fit the dynamic Gaussians to the training frames, statics held fixed.
    FitDynamic {
        #[arg(long)]
        iters: Option<usize>,
        /// Input scene (defaults to static.ply in the work directory).
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Render a scene from any camera at any time.
    Render {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Camera JSON; a dataset camera is used when absent.
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        camera_index: usize,
        /// Frame-start time in seconds.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        time: f64,
        #[arg(long)]
        rolling: bool,
    },
    /// Metrics on the held-out frames.
    Evaluate {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        exclude_mask: Option<PathBuf>,
    },
    /// Frame counters and sub-frame offsets from the LED board.
    DecodeSync,
    /// Compare analytic gradients with central differences.
    GradientCheck {
        #[arg(long)]
        eps: Option<f64>,
    },
}

/// Loads the config file (or defaults) and applies the flag overrides.
pub fn resolve_config(common: &CommonArgs, command: &Command) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.work_dir = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(h) = common.holdout_every {
        cfg.holdout_every = h;
    }
    if let Some(s) = common.shutter {
        cfg.shutter = s;
    }
    match command {
        Command::RemoveFire { threshold: Some(t) } => cfg.remove_fire.threshold = *t,
        Command::FusePointcloud { stride: Some(s) } => cfg.pointcloud.stride = *s,
        Command::FuseFlow { alpha0: Some(a) } => cfg.flow.alpha0 = *a,
        Command::FitStatic { iters: Some(n), .. } => cfg.fit_static.iters = *n,
        Command::FitDynamic { iters: Some(n), .. } => cfg.fit_dynamic.iters = *n,
        Command::Evaluate {
            exclude_mask: Some(m), ..
        } => cfg.evaluate.exclude_mask = Some(m.clone()),
        Command::GradientCheck { eps: Some(e) } => cfg.gradient_check.eps = *e,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.common, &cli.command)?;
    let work = cfg
        .work_dir
        .clone()
        .ok_or_else(|| invalid("no output directory given (--out or /work_dir)"))?;
    let ctx = Context::new(cfg, work);
    match cli.command {
        Command::SynthGenerate { motion, led, line_time } => {
            let motion = motion.map(|m| match m {
                MotionArg::Rigid => MotionModel::RigidTranslation {
                    velocity: [0.0, 0.03, 0.0],
                },
                MotionArg::Plume => PipelineConfig::default().synth.motion_model,
            });
            stages::synth_generate(&ctx, &SynthOverrides { motion, led, line_time })
        }
        Command::RemoveFire { .. } => stages::remove_fire(&ctx),
        Command::AlignDepth => stages::align_depth(&ctx),
        Command::FusePointcloud { .. } => stages::fuse_point_cloud(&ctx),
        Command::FuseFlow { .. } => stages::fuse_flow(&ctx),
        Command::InitGaussians => stages::init_gaussians(&ctx),
        Command::FitStatic { scene, .. } => stages::fit_static(&ctx, scene.as_deref()),
        Command::FitDynamic { scene, .. } => stages::fit_dynamic(&ctx, scene.as_deref()),
        Command::Render {
            scene,
            camera,
            camera_index,
            time,
            rolling,
        } => stages::render_view(
            &ctx,
            &RenderArgs {
                scene,
                camera,
                camera_index,
                time,
                rolling,
            },
        ),
        Command::Evaluate { scene, .. } => stages::evaluate(&ctx, scene.as_deref()).map(|_| ()),
        Command::DecodeSync => stages::decode_sync(&ctx).map(|_| ()),
        Command::GradientCheck { .. } => stages::gradient_check(&ctx).map(|_| ()),
    }
}

/// Parses `args` (including the program name) and runs the command. Argument
/// errors are reported as validation errors.
pub fn run_args<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| invalid(e.to_string().trim_end()))?;
    run(cli)
}

/// Thread count from the environment, if set.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}
