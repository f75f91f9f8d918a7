//! Pipeline configuration file. Every field has a default, unknown keys are
//! rejected, and errors carry the JSON pointer of the offending value.

use std::path::{Path, PathBuf};

use flamesplat::flowfuse::VoxelGridSpec;
use flamesplat::gaussians::{DEFAULT_FLAME_COLOR, DEFAULT_INIT_OPACITY};
use flamesplat::optimize::{LossWeights, OptimizerConfig};
use flamesplat::synth::SynthSpec;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input dataset directory.
    pub dataset: Option<PathBuf>,
    /// Stage outputs go here.
    pub work_dir: Option<PathBuf>,
    /// Base seed; stages derive their own streams from it.
    pub seed: u64,
    /// Every n-th frame (0, n, 2n, ...) is held out for evaluation; 0 disables.
    pub holdout_every: usize,
    pub shutter: ShutterChoice,
    pub synth: SynthSpec,
    pub remove_fire: RemoveFireConfig,
    pub pointcloud: PointcloudConfig,
    pub flow: FlowConfig,
    pub init: InitConfig,
    pub loss: LossConfig,
    pub fit_static: FitConfig,
    pub fit_dynamic: FitConfig,
    pub evaluate: EvalConfig,
    pub gradient_check: GradientCheckConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            work_dir: None,
            seed: 0,
            holdout_every: 8,
            shutter: ShutterChoice::Auto,
            synth: SynthSpec::default(),
            remove_fire: RemoveFireConfig::default(),
            pointcloud: PointcloudConfig::default(),
            flow: FlowConfig::default(),
            init: InitConfig::default(),
            loss: LossConfig::default(),
            fit_static: FitConfig::default(),
            fit_dynamic: FitConfig::default(),
            evaluate: EvalConfig::default(),
            gradient_check: GradientCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ShutterChoice {
    /// Rolling when the cameras have a non-zero line time.
    Auto,
    Global,
    Rolling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoveFireConfig {
    /// Luminance deviation that marks a pixel dynamic.
    pub threshold: f64,
}

impl Default for RemoveFireConfig {
    fn default() -> Self {
        Self { threshold: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointcloudConfig {
    pub stride: usize,
    /// Neighbors used for the initial Gaussian scale.
    pub knn: usize,
    pub opacity: f64,
}

impl Default for PointcloudConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            knn: 3,
            opacity: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        // covers the synthetic flame volume
        Self {
            origin: [-0.4, -0.8, -0.4],
            voxel_size: 0.05,
            dims: [16, 32, 16],
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<VoxelGridSpec, CliError> {
        VoxelGridSpec::new(Vector3::from(self.origin), self.voxel_size, self.dims)
            .map_err(|e| CliError::Validation(format!("/flow/grid: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub alpha0: f64,
    pub grid: GridConfig,
    /// Fuse every n-th training frame.
    pub frame_stride: usize,
    pub depth_tolerance_voxels: f64,
    pub min_cameras: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.1,
            grid: GridConfig::default(),
            frame_stride: 2,
            depth_tolerance_voxels: 1.5,
            min_cameras: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Fallback color for voxels no camera sees inside a mask.
    pub color: [f64; 3],
    pub opacity: f64,
    /// Isotropic scale; half the voxel size when absent.
    pub scale: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            color: DEFAULT_FLAME_COLOR,
            opacity: DEFAULT_INIT_OPACITY,
            scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda_ssim: f64,
    pub lambda_depth_start: f64,
    pub lambda_depth_end: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda_ssim: w.lambda_ssim,
            lambda_depth_start: w.lambda_depth_start,
            lambda_depth_end: w.lambda_depth_end,
        }
    }
}

impl LossConfig {
    pub fn weights(&self, iters: usize, use_depth: bool) -> LossWeights {
        let (a, b) = if use_depth {
            (self.lambda_depth_start, self.lambda_depth_end)
        } else {
            (0.0, 0.0)
        };
        LossWeights {
            lambda1: self.lambda1,
            lambda_ssim: self.lambda_ssim,
            lambda_depth_start: a,
            lambda_depth_end: b,
            total_iters: iters.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iters: usize,
    /// Scene extent in meters; scales the position learning rate.
    pub extent: f64,
    pub position_lr_init: f64,
    pub position_lr_final: f64,
    pub velocity_lr_factor: f64,
    pub scale_lr: f64,
    pub rotation_lr: f64,
    pub color_lr: f64,
    pub opacity_lr: f64,
    pub t_mu_lr: f64,
    pub t_sigma_lr: f64,
    pub min_t_sigma: f64,
    /// Depth term on; when absent the static stage uses it and the dynamic
    /// stage does not.
    pub use_depth: Option<bool>,
}

impl Default for FitConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            iters: 3000,
            extent: 3.0,
            position_lr_init: o.position_lr_init,
            position_lr_final: o.position_lr_final,
            velocity_lr_factor: o.velocity_lr_factor,
            scale_lr: o.scale_lr,
            rotation_lr: o.rotation_lr,
            color_lr: o.color_lr,
            opacity_lr: o.opacity_lr,
            t_mu_lr: o.t_mu_lr,
            t_sigma_lr: o.t_sigma_lr,
            min_t_sigma: o.min_t_sigma,
            use_depth: None,
        }
    }
}

impl FitConfig {
    pub fn optimizer(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            iters: self.iters,
            seed,
            extent: self.extent,
            position_lr_init: self.position_lr_init,
            position_lr_final: self.position_lr_final,
            velocity_lr_factor: self.velocity_lr_factor,
            scale_lr: self.scale_lr,
            rotation_lr: self.rotation_lr,
            color_lr: self.color_lr,
            opacity_lr: self.opacity_lr,
            t_mu_lr: self.t_mu_lr,
            t_sigma_lr: self.t_sigma_lr,
            min_t_sigma: self.min_t_sigma,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Static PNG mask of pixels to ignore (e.g. a visible sync board). The
    /// dataset's `sync_mask.png` is used when this is absent.
    pub exclude_mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-3,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let cfg: Self = flamesplat::io::read_json(path).map_err(|e| match e {
            flamesplat::io::IoError::Format { path, msg } => {
                CliError::Validation(format!("{}: {msg}", path.display()))
            }
            other => other.into(),
        })?;
        Ok(cfg)
    }

    /// Range checks that serde cannot express. Messages name the JSON pointer.
    pub fn validate(&self) -> Result<(), CliError> {
        let err = |ptr: &str, msg: &str| Err(CliError::Validation(format!("{ptr}: {msg}")));
        let t = self.remove_fire.threshold;
        if !(t > 0.0 && t < 1.0) {
            return err("/remove_fire/threshold", "must lie in (0, 1)");
        }
        if self.pointcloud.stride == 0 || self.pointcloud.knn == 0 {
            return err("/pointcloud", "stride and knn must be at least 1");
        }
        for (ptr, o) in [("/pointcloud/opacity", self.pointcloud.opacity), ("/init/opacity", self.init.opacity)] {
            if !(o > 0.0 && o < 1.0) {
                return err(ptr, "must lie in (0, 1)");
            }
        }
        if !(self.flow.alpha0 >= 0.0 && self.flow.alpha0.is_finite()) {
            return err("/flow/alpha0", "must be non-negative");
        }
        if self.flow.frame_stride == 0 {
            return err("/flow/frame_stride", "must be at least 1");
        }
        if self.flow.min_cameras < 2 {
            return err("/flow/min_cameras", "must be at least 2");
        }
        if !(self.flow.depth_tolerance_voxels > 0.0) {
            return err("/flow/depth_tolerance_voxels", "must be positive");
        }
        self.flow.grid.spec()?;
        if let Some(s) = self.init.scale {
            if !(s > 0.0 && s.is_finite()) {
                return err("/init/scale", "must be positive");
            }
        }
        if self.init.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return err("/init/color", "channels must lie in [0, 1]");
        }
        self.loss
            .weights(1, true)
            .validate()
            .map_err(|e| CliError::Validation(format!("/loss: {e}")))?;
        for (ptr, f) in [("/fit_static", &self.fit_static), ("/fit_dynamic", &self.fit_dynamic)] {
            f.optimizer(0)
                .validate()
                .map_err(|e| CliError::Validation(format!("{ptr}: {e}")))?;
        }
        let g = &self.gradient_check;
        if !(1e-6..=1e-3).contains(&g.eps) {
            return err("/gradient_check/eps", "must lie in [1e-6, 1e-3]");
        }
        if !(g.tolerance > 0.0) {
            return err("/gradient_check/tolerance", "must be positive");
        }
        self.synth
            .validate()
            .map_err(|e| CliError::Validation(format!("/synth: {e}")))?;
        Ok(())
    }
}
