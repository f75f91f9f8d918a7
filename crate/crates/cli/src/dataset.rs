//! Read access to a dataset directory plus the train/held-out split.

use std::path::Path;

use flamesplat::camera::Camera;
use flamesplat::io::{self, DatasetLayout, Manifest};
use flamesplat::raster::{DepthMap, FlowMap, Image, Mask};
use rayon::prelude::*;

use crate::error::{invalid, CliError};

pub struct Dataset {
    pub layout: DatasetLayout,
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        if !root.is_dir() {
            return Err(CliError::Missing(root.to_path_buf()));
        }
        let layout = DatasetLayout::new(root);
        let manifest = layout.read_manifest()?;
        let cameras = io::read_cameras(&layout.cameras())?;
        if cameras.len() != manifest.camera_count {
            return Err(invalid(format!(
                "{}: {} cameras but the manifest lists {}",
                layout.cameras().display(),
                cameras.len(),
                manifest.camera_count
            )));
        }
        for (i, c) in cameras.iter().enumerate() {
            if (c.width(), c.height()) != (manifest.width, manifest.height) {
                return Err(invalid(format!(
                    "camera {i} is {}x{}, frames are {}x{}",
                    c.width(),
                    c.height(),
                    manifest.width,
                    manifest.height
                )));
            }
        }
        Ok(Self {
            layout,
            manifest,
            cameras,
        })
    }

    pub fn camera_count(&self) -> usize {
        self.manifest.camera_count
    }

    pub fn frame_count(&self) -> usize {
        self.manifest.frame_count
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.manifest.frame_rate_hz
    }

    pub fn frame_time(&self, c: usize, f: usize) -> f64 {
        self.manifest.frame_times[c][f]
    }

    /// Mean frame-start time over cameras.
    pub fn mean_frame_time(&self, f: usize) -> f64 {
        let n = self.camera_count() as f64;
        self.manifest.frame_times.iter().map(|t| t[f]).sum::<f64>() / n
    }

    pub fn frame(&self, c: usize, f: usize) -> Result<Image, CliError> {
        Ok(io::read_image(&self.layout.frame(c, f))?)
    }

    pub fn mask(&self, c: usize, f: usize) -> Result<Mask, CliError> {
        Ok(io::read_mask(&self.layout.mask(c, f))?)
    }

    pub fn flow(&self, c: usize, f: usize) -> Result<FlowMap, CliError> {
        Ok(io::read_flow(&self.layout.flow(c, f))?)
    }

    pub fn flame_depth(&self, c: usize, f: usize) -> Result<DepthMap, CliError> {
        Ok(io::read_depth(&self.layout.flame_depth(c, f))?)
    }

    pub fn mono_frame(&self, c: usize, f: usize) -> Result<DepthMap, CliError> {
        Ok(io::read_depth(&self.layout.mono_frame(c, f))?)
    }

    pub fn stereo(&self, c: usize) -> Result<DepthMap, CliError> {
        Ok(io::read_depth(&self.layout.stereo(c))?)
    }

    pub fn mono(&self, c: usize) -> Result<DepthMap, CliError> {
        Ok(io::read_depth(&self.layout.mono(c))?)
    }

    /// Frames of camera `c` at the given indices, decoded in parallel.
    pub fn frames(&self, c: usize, frames: &[usize]) -> Result<Vec<Image>, CliError> {
        frames.par_iter().map(|&f| self.frame(c, f)).collect()
    }

    pub fn split(&self, holdout_every: usize) -> Split {
        Split::new(self.frame_count(), holdout_every)
    }
}

/// Every `holdout_every`-th frame, starting at 0, is held out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl Split {
    pub fn new(frame_count: usize, holdout_every: usize) -> Self {
        let held = |f: usize| holdout_every > 0 && f % holdout_every == 0;
        Self {
            train: (0..frame_count).filter(|&f| !held(f)).collect(),
            heldout: (0..frame_count).filter(|&f| held(f)).collect(),
        }
    }

    /// Training frames whose successor is also a training frame, so the flow
    /// between them never touches a held-out image.
    pub fn flow_pairs(&self, stride: usize) -> Vec<usize> {
        self.train
            .iter()
            .copied()
            .filter(|f| self.train.binary_search(&(f + 1)).is_ok())
            .step_by(stride.max(1))
            .collect()
    }
}
