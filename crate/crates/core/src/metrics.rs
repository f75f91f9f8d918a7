//! Image and depth quality metrics: PSNR, SSIM, masked flame variants and
//! depth RMSE after affine alignment of monocular depth.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::depthfuse::{fit_pairs, DepthFuseError};
use crate::optimize::{loss_ssim, ssim_map, OptimizeError, SSIM_WINDOW};
use crate::raster::{check_same_shape, DepthMap, Image, Mask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error(transparent)]
    Ssim(#[from] OptimizeError),
    #[error("depth alignment failed: {0}")]
    Depth(#[from] DepthFuseError),
}

fn same(a: (usize, usize), b: (usize, usize)) -> Result<(), MetricsError> {
    check_same_shape(a, b).map_err(|_| MetricsError::ShapeMismatch(a, b))
}

/// `10 log10(1 / MSE)` over the (masked) pixels, all channels. Identical
/// inputs give `f64::INFINITY`.
pub fn psnr(render: &Image, target: &Image, mask: Option<&Mask>) -> Result<f64, MetricsError> {
    same(render.shape(), target.shape())?;
    if let Some(m) = mask {
        same(render.shape(), m.shape())?;
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for (i, (a, b)) in render.as_slice().iter().zip(target.as_slice()).enumerate() {
        if mask.is_some_and(|m| !m.as_slice()[i]) {
            continue;
        }
        for c in 0..3 {
            se += (a[c] - b[c]).powi(2);
        }
        n += 3;
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean SSIM. With a mask, only window positions centered on masked pixels
/// are averaged.
pub fn ssim_metric(render: &Image, target: &Image, mask: Option<&Mask>) -> Result<f64, MetricsError> {
    let Some(m) = mask else {
        // written this way so the metric is bit-identical to `1 - loss`
        return Ok(1.0 - loss_ssim(render, target)?);
    };
    let map = ssim_map(render, target)?;
    same(render.shape(), m.shape())?;
    let r = SSIM_WINDOW / 2;
    let mut s = 0.0;
    let mut n = 0usize;
    for y in 0..map.height() {
        for x in 0..map.width() {
            if *m.get(x + r, y + r) {
                s += map.get(x, y);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(s / n as f64)
}

/// Aligns `mono` to `render_depth` by least squares and returns the RMSE of
/// the aligned mono depth over jointly valid pixels.
pub fn rmse_depth(render_depth: &DepthMap, mono_depth: &DepthMap) -> Result<f64, MetricsError> {
    same(render_depth.shape(), mono_depth.shape())?;
    let mut pairs = Vec::new();
    for y in 0..render_depth.height() {
        for x in 0..render_depth.width() {
            if let (Some(m), Some(r)) = (mono_depth.at(x, y), render_depth.at(x, y)) {
                pairs.push((m, r));
            }
        }
    }
    let align = fit_pairs(&pairs)?;
    let se: f64 = pairs.iter().map(|&(m, r)| (align.apply(m) - r).powi(2)).sum();
    Ok((se / pairs.len() as f64).sqrt())
}

fn finite_or_null<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        _ => s.serialize_none(),
    }
}

/// Metrics for one evaluated view. `None` means not computed (no flame mask
/// or no depth reference); infinite PSNR is written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub camera: usize,
    pub frame: usize,
    #[serde(serialize_with = "finite_or_null")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    #[serde(serialize_with = "finite_or_null")]
    pub psnr_flame: Option<f64>,
    pub ssim_flame: Option<f64>,
    pub rmse_depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(serialize_with = "finite_or_null")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    #[serde(serialize_with = "finite_or_null")]
    pub psnr_flame: Option<f64>,
    pub ssim_flame: Option<f64>,
    pub rmse_depth: Option<f64>,
    pub frames: Vec<FrameMetrics>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Averages every metric over the frames where it is defined.
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Self {
        Self {
            psnr: mean(frames.iter().map(|f| f.psnr)),
            ssim: mean(frames.iter().map(|f| f.ssim)),
            psnr_flame: mean(frames.iter().map(|f| f.psnr_flame)),
            ssim_flame: mean(frames.iter().map(|f| f.ssim_flame)),
            rmse_depth: mean(frames.iter().map(|f| f.rmse_depth)),
            frames,
        }
    }

    /// Per-frame rows; empty cells for undefined values, `inf` for a perfect
    /// PSNR.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["camera", "frame", "psnr", "ssim", "psnr_flame", "ssim_flame", "rmse_depth"])
            .expect("in-memory write");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &self.frames {
            w.write_record([
                f.camera.to_string(),
                f.frame.to_string(),
                cell(f.psnr),
                cell(f.ssim),
                cell(f.psnr_flame),
                cell(f.ssim_flame),
                cell(f.rmse_depth),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ascii")
    }
}

/// Optional masks applied during evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalMasks<'a> {
    pub flame: Option<&'a Mask>,
    /// Pixels to ignore everywhere, such as a visible sync board.
    pub exclude: Option<&'a Mask>,
}

/// All metrics for one render/target pair.
pub fn evaluate_frame(
    camera: usize,
    frame: usize,
    render: &Image,
    target: &Image,
    masks: EvalMasks<'_>,
    render_depth: Option<(&DepthMap, &DepthMap)>,
) -> Result<FrameMetrics, MetricsError> {
    let keep = masks.exclude.map(|e| e.map(|&x| !x));
    let flame = match (masks.flame, &keep) {
        (Some(f), Some(k)) => {
            same(f.shape(), k.shape())?;
            Some(f.zip_with(k, |a, b| *a && *b))
        }
        (Some(f), None) => Some(f.clone()),
        _ => None,
    };
    let flame = flame.filter(|f| f.as_slice().iter().any(|&b| b));
    let (psnr_flame, ssim_flame) = match &flame {
        Some(f) => (
            Some(psnr(render, target, Some(f))?),
            // flames touching only the image border have no SSIM window
            ssim_metric(render, target, Some(f)).ok(),
        ),
        None => (None, None),
    };
    let rmse = match render_depth {
        Some((r, m)) => rmse_depth(r, m).ok(),
        None => None,
    };
    Ok(FrameMetrics {
        camera,
        frame,
        psnr: Some(psnr(render, target, keep.as_ref())?),
        ssim: Some(ssim_metric(render, target, keep.as_ref())?),
        psnr_flame,
        ssim_flame,
        rmse_depth: rmse,
    })
}
