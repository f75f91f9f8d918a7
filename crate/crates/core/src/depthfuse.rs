//! Monocular-to-stereo depth alignment and fused static point cloud.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::camera::Camera;
use crate::raster::{DepthMap, Image, Raster};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthFuseError {
    #[error("only {0} jointly valid pixels; at least 2 are needed")]
    InsufficientOverlap(usize),
    #[error("monocular depth is constant over the overlap; scale is undetermined")]
    DegenerateFit,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stride must be at least 1")]
    BadStride,
}

/// `aligned = scale * mono + offset`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearAlignment {
    pub scale: f64,
    pub offset: f64,
}

impl LinearAlignment {
    pub const IDENTITY: LinearAlignment = LinearAlignment {
        scale: 1.0,
        offset: 0.0,
    };

    #[inline]
    pub fn apply(&self, depth: f64) -> f64 {
        self.scale * depth + self.offset
    }
}

fn joint_pairs(source: &DepthMap, target: &DepthMap) -> Result<Vec<(f64, f64)>, DepthFuseError> {
    if source.shape() != target.shape() {
        return Err(DepthFuseError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let mut pairs = Vec::new();
    for y in 0..source.height() {
        for x in 0..source.width() {
            if let (Some(s), Some(t)) = (source.at(x, y), target.at(x, y)) {
                pairs.push((s, t));
            }
        }
    }
    Ok(pairs)
}

/// Closed-form least squares fit of `a * mono + b ≈ stereo` over pixels valid
/// in both maps. Sums are accumulated in raster order.
pub fn fit_alignment(mono: &DepthMap, stereo: &DepthMap) -> Result<LinearAlignment, DepthFuseError> {
    let pairs = joint_pairs(mono, stereo)?;
    fit_pairs(&pairs)
}

pub(crate) fn fit_pairs(pairs: &[(f64, f64)]) -> Result<LinearAlignment, DepthFuseError> {
    let n = pairs.len();
    if n < 2 {
        return Err(DepthFuseError::InsufficientOverlap(n));
    }
    let nf = n as f64;
    let (sx, sy) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    let (mx, my) = (sx / nf, sy / nf);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in pairs {
        let dx = x - mx;
        sxx += dx * dx;
        sxy += dx * (y - my);
    }
    // Relative test: variance negligible against the magnitude of the data.
    if !(sxx > 1e-24 * nf * (mx * mx).max(1e-300)) {
        return Err(DepthFuseError::DegenerateFit);
    }
    let scale = sxy / sxx;
    Ok(LinearAlignment {
        scale,
        offset: my - scale * mx,
    })
}

/// Applies the affine map; results `<= 0` become invalid.
pub fn apply_alignment(mono: &DepthMap, align: &LinearAlignment) -> DepthMap {
    let (w, h) = mono.shape();
    let mut values = Raster::filled(w, h, 0.0);
    let mut valid = Raster::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = mono.at(x, y) {
                let a = align.apply(d);
                values.set(x, y, a);
                valid.set(x, y, a > 0.0 && a.is_finite());
            }
        }
    }
    DepthMap { values, valid }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    Stereo,
    Mono,
}

/// Where a fused point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointOrigin {
    pub camera: usize,
    pub pixel: (usize, usize),
    pub source: DepthSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
    /// Parallel to `points` when produced by [`fuse_pointcloud`]; empty for
    /// clouds loaded from disk.
    pub origins: Vec<PointOrigin>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-projects every `stride`-th pixel of each view, preferring stereo depth
/// and falling back to aligned monocular depth.
pub fn fuse_pointcloud(
    cameras: &[Camera],
    stereo: &[DepthMap],
    aligned_mono: &[DepthMap],
    images: &[Image],
    stride: usize,
) -> Result<PointCloud, DepthFuseError> {
    if stride == 0 {
        return Err(DepthFuseError::BadStride);
    }
    let n = cameras.len();
    if stereo.len() != n || aligned_mono.len() != n || images.len() != n {
        return Err(DepthFuseError::ShapeMismatch(format!(
            "{} cameras, {} stereo, {} mono, {} images",
            n,
            stereo.len(),
            aligned_mono.len(),
            images.len()
        )));
    }
    let mut cloud = PointCloud::default();
    for (ci, cam) in cameras.iter().enumerate() {
        let shape = (cam.width(), cam.height());
        for (what, s) in [
            ("stereo", stereo[ci].shape()),
            ("mono", aligned_mono[ci].shape()),
            ("image", images[ci].shape()),
        ] {
            if s != shape {
                return Err(DepthFuseError::ShapeMismatch(format!(
                    "camera {ci}: {what} is {s:?}, camera is {shape:?}"
                )));
            }
        }
        for y in (0..cam.height()).step_by(stride) {
            for x in (0..cam.width()).step_by(stride) {
                let (depth, source) = match (stereo[ci].at(x, y), aligned_mono[ci].at(x, y)) {
                    (Some(d), _) => (d, DepthSource::Stereo),
                    (None, Some(d)) => (d, DepthSource::Mono),
                    (None, None) => continue,
                };
                let position = cam
                    .backproject(&Vector2::new(x as f64, y as f64), depth)
                    .expect("validated depth is positive");
                cloud.points.push(CloudPoint {
                    position,
                    color: *images[ci].get(x, y),
                });
                cloud.origins.push(PointOrigin {
                    camera: ci,
                    pixel: (x, y),
                    source,
                });
            }
        }
    }
    Ok(cloud)
}
