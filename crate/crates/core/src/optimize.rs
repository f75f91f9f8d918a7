//! Training losses, Adam fitting of Gaussian parameters and a finite
//! difference gradient check.
//!
//! The objective is `l1 * L1 + l_ssim * (1 - SSIM) + lambda_depth(iter) * L_depth`
//! where the depth weight decays geometrically over training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::Camera;
use crate::gaussians::{
    DynamicGaussian, GaussianScene, StaticGaussian, DYNAMIC_PARAMS, P_COLOR, P_LOG_SCALE,
    P_OPACITY, P_POS, P_QUAT, P_T_MU, P_T_SIGMA, P_VEL, STATIC_PARAMS,
};
use crate::raster::{check_same_shape, DepthMap, Image, Mask, Raster};
use crate::splatrender::{
    effective_times, render_at_times, render_backward, RenderRequest, RenderSettings,
    SceneGradient, ShutterMode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {0}x{1} is smaller than the 11x11 SSIM window")]
    ImageTooSmall(usize, usize),
    #[error("no pixel is valid in both depth maps")]
    NoValidDepth,
    #[error("no training batches")]
    EmptyBatches,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

fn shape_err(a: (usize, usize), b: (usize, usize)) -> OptimizeError {
    OptimizeError::ShapeMismatch(format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<(), OptimizeError> {
    check_same_shape(a, b).map_err(|_| shape_err(a, b))
}

// ---------------------------------------------------------------- L1

pub fn loss_l1(render: &Image, target: &Image) -> Result<f64, OptimizeError> {
    same_shape(render.shape(), target.shape())?;
    let mut s = 0.0;
    for (a, b) in render.as_slice().iter().zip(target.as_slice()) {
        s += (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
    }
    Ok(s / (3 * render.len()) as f64)
}

fn loss_l1_grad(render: &Image, target: &Image) -> Raster<[f64; 3]> {
    let n = (3 * render.len()) as f64;
    let mut g = Raster::filled(render.width(), render.height(), [0.0; 3]);
    for ((o, a), b) in g.as_mut_slice().iter_mut().zip(render.as_slice()).zip(target.as_slice()) {
        for c in 0..3 {
            o[c] = sign(a[c] - b[c]) / n;
        }
    }
    g
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------- SSIM

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * row[x + i];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an output-grid plane back onto the
/// `w x h` input grid.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

struct ChannelStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    s_xx: Vec<f64>,
    s_yy: Vec<f64>,
    s_xy: Vec<f64>,
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.as_slice().iter().map(|p| p[c]).collect()
}

fn channel_stats(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> ChannelStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, k);
    let mu_y = filter_valid(y, w, h, k);
    let exx = filter_valid(&xx, w, h, k);
    let eyy = filter_valid(&yy, w, h, k);
    let exy = filter_valid(&xy, w, h, k);
    let n = mu_x.len();
    let mut s_xx = vec![0.0; n];
    let mut s_yy = vec![0.0; n];
    let mut s_xy = vec![0.0; n];
    for i in 0..n {
        s_xx[i] = exx[i] - mu_x[i] * mu_x[i];
        s_yy[i] = eyy[i] - mu_y[i] * mu_y[i];
        s_xy[i] = exy[i] - mu_x[i] * mu_y[i];
    }
    ChannelStats {
        mu_x,
        mu_y,
        s_xx,
        s_yy,
        s_xy,
    }
}

fn check_ssim_input(a: &Image, b: &Image) -> Result<(), OptimizeError> {
    same_shape(a.shape(), b.shape())?;
    let (w, h) = a.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(OptimizeError::ImageTooSmall(w, h));
    }
    Ok(())
}

/// Channel-averaged SSIM at every valid window position; the map is
/// `(w - 10) x (h - 10)` and entry `(x, y)` is centered on pixel `(x + 5, y + 5)`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Raster<f64>, OptimizeError> {
    check_ssim_input(a, b)?;
    let (w, h) = a.shape();
    let k = ssim_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut map = vec![0.0; ow * oh];
    for c in 0..3 {
        let st = channel_stats(&channel(a, c), &channel(b, c), w, h, &k);
        for i in 0..map.len() {
            let (mx, my) = (st.mu_x[i], st.mu_y[i]);
            let num = (2.0 * mx * my + C1) * (2.0 * st.s_xy[i] + C2);
            let den = (mx * mx + my * my + C1) * (st.s_xx[i] + st.s_yy[i] + C2);
            map[i] += num / den / 3.0;
        }
    }
    Ok(Raster::from_vec(ow, oh, map).expect("sized"))
}

/// Mean SSIM over the valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, OptimizeError> {
    let map = ssim_map(a, b)?;
    Ok(map.as_slice().iter().sum::<f64>() / map.len() as f64)
}

/// `1 - SSIM`.
pub fn loss_ssim(render: &Image, target: &Image) -> Result<f64, OptimizeError> {
    Ok(1.0 - ssim(render, target)?)
}

/// `1 - SSIM` and its gradient with respect to `render`.
pub fn loss_ssim_grad(render: &Image, target: &Image) -> Result<(f64, Raster<[f64; 3]>), OptimizeError> {
    check_ssim_input(render, target)?;
    let (w, h) = render.shape();
    let k = ssim_kernel();
    let mut grad = Raster::filled(w, h, [0.0; 3]);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x = channel(render, c);
        let y = channel(target, c);
        let st = channel_stats(&x, &y, w, h, &k);
        let n = st.mu_x.len();
        count = n;
        let mut g_mu = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (st.mu_x[i], st.mu_y[i]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * st.s_xy[i] + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = st.s_xx[i] + st.s_yy[i] + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            let d = b1 * b2;
            g_mu[i] = (2.0 * my * (a2 - a1) - 2.0 * mx * s * (b2 - b1)) / d;
            g_xx[i] = -s / b2;
            g_xy[i] = 2.0 * a1 / d;
        }
        let bm = filter_valid_adjoint(&g_mu, w, h, &k);
        let bxx = filter_valid_adjoint(&g_xx, w, h, &k);
        let bxy = filter_valid_adjoint(&g_xy, w, h, &k);
        let scale = -1.0 / (3 * n) as f64;
        for (p, o) in grad.as_mut_slice().iter_mut().enumerate() {
            o[c] = scale * (bm[p] + 2.0 * x[p] * bxx[p] + y[p] * bxy[p]);
        }
    }
    Ok((1.0 - total / (3 * count) as f64, grad))
}

// ---------------------------------------------------------------- depth

/// Mean absolute difference over pixels valid in both maps.
pub fn loss_depth(render_depth: &DepthMap, aligned_mono: &DepthMap) -> Result<f64, OptimizeError> {
    Ok(loss_depth_grad(render_depth, aligned_mono)?.0)
}

fn loss_depth_grad(
    render_depth: &DepthMap,
    target: &DepthMap,
) -> Result<(f64, Raster<f64>), OptimizeError> {
    same_shape(render_depth.shape(), target.shape())?;
    let (w, h) = render_depth.shape();
    let mut n = 0usize;
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            if let (Some(a), Some(b)) = (render_depth.at(x, y), target.at(x, y)) {
                s += (a - b).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(OptimizeError::NoValidDepth);
    }
    let inv = 1.0 / n as f64;
    let g = Raster::from_fn(w, h, |x, y| match (render_depth.at(x, y), target.at(x, y)) {
        (Some(a), Some(b)) => sign(a - b) * inv,
        _ => 0.0,
    });
    Ok((s * inv, g))
}

// ---------------------------------------------------------------- weights

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda_ssim: f64,
    pub lambda_depth_start: f64,
    pub lambda_depth_end: f64,
    pub total_iters: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda_ssim: 0.2,
            lambda_depth_start: 100.0,
            lambda_depth_end: 1.0,
            total_iters: 1,
        }
    }
}

impl LossWeights {
    pub fn with_iters(total_iters: usize) -> Self {
        Self {
            total_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        let vals = [
            self.lambda1,
            self.lambda_ssim,
            self.lambda_depth_start,
            self.lambda_depth_end,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(OptimizeError::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if self.total_iters == 0 {
            return Err(OptimizeError::InvalidConfig("total_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Geometric interpolation from `lambda_depth_start` at iteration 0 to
/// `lambda_depth_end` at iteration `total_iters - 1`.
pub fn depth_weight_schedule(iter: usize, weights: &LossWeights) -> f64 {
    let (a, b) = (weights.lambda_depth_start, weights.lambda_depth_end);
    let last = weights.total_iters.saturating_sub(1);
    if iter == 0 || last == 0 {
        return a;
    }
    if iter >= last {
        return b;
    }
    if a == 0.0 || b == 0.0 {
        // geometric path through zero is undefined; fall back to linear
        let f = iter as f64 / last as f64;
        return a + (b - a) * f;
    }
    a * (b / a).powf(iter as f64 / last as f64)
}

// ---------------------------------------------------------------- total

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub camera: Camera,
    pub target: Image,
    /// Aligned monocular depth; the depth term is skipped when absent.
    pub target_depth: Option<DepthMap>,
    /// Dynamic mask of the view (used for evaluation, not by the loss).
    pub mask: Option<Mask>,
    pub time: f64,
    pub shutter: ShutterMode,
}

impl TrainBatch {
    pub fn new(camera: Camera, target: Image, time: f64) -> Self {
        Self {
            camera,
            target,
            target_depth: None,
            mask: None,
            time,
            shutter: ShutterMode::Global,
        }
    }

    fn request(&self) -> RenderRequest {
        RenderRequest {
            camera: self.camera,
            time: self.time,
            shutter: self.shutter,
        }
    }

    fn validate(&self) -> Result<(), OptimizeError> {
        let shape = (self.camera.width(), self.camera.height());
        same_shape(self.target.shape(), shape)?;
        if let Some(d) = &self.target_depth {
            same_shape(d.shape(), shape)?;
        }
        if let Some(m) = &self.mask {
            same_shape(m.shape(), shape)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    /// Unweighted depth term (0 when skipped).
    pub depth: f64,
    pub lambda_depth: f64,
}

impl LossBreakdown {
    fn assemble(weights: &LossWeights, l1: f64, ssim: f64, depth: f64, lambda_depth: f64) -> Self {
        let total = weights.lambda1 * l1 + weights.lambda_ssim * ssim + lambda_depth * depth;
        Self {
            total,
            l1,
            ssim,
            depth,
            lambda_depth,
        }
    }
}

pub fn total_loss(
    scene: &GaussianScene,
    batch: &TrainBatch,
    weights: &LossWeights,
    iter: usize,
) -> Result<LossBreakdown, OptimizeError> {
    total_loss_with(scene, batch, weights, iter, &RenderSettings::default())
}

pub fn total_loss_with(
    scene: &GaussianScene,
    batch: &TrainBatch,
    weights: &LossWeights,
    iter: usize,
    settings: &RenderSettings,
) -> Result<LossBreakdown, OptimizeError> {
    batch.validate()?;
    let times = effective_times(scene, &batch.request(), settings);
    Ok(evaluate(scene, batch, weights, iter, settings, &times, None, false)?.0)
}

/// Loss and parameter gradient for one batch; capture times are frozen at the
/// values implied by the current scene.
pub fn loss_and_gradient(
    scene: &GaussianScene,
    batch: &TrainBatch,
    weights: &LossWeights,
    iter: usize,
    settings: &RenderSettings,
) -> Result<(LossBreakdown, SceneGradient), OptimizeError> {
    batch.validate()?;
    let times = effective_times(scene, &batch.request(), settings);
    let (loss, grad) = evaluate(scene, batch, weights, iter, settings, &times, None, true)?;
    Ok((loss, grad.expect("requested")))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    scene: &GaussianScene,
    batch: &TrainBatch,
    weights: &LossWeights,
    iter: usize,
    settings: &RenderSettings,
    times: &[Option<f64>],
    depth_valid: Option<&Mask>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<SceneGradient>), OptimizeError> {
    let mut out = render_at_times(scene, &batch.camera, settings, times);
    if let Some(mask) = depth_valid {
        out.depth = DepthMap::with_mask(out.depth.values, mask.clone())
            .map_err(|e| OptimizeError::ShapeMismatch(e.to_string()))?;
    }
    let lambda_depth = match batch.target_depth {
        Some(_) => depth_weight_schedule(iter, weights),
        None => 0.0,
    };
    let l1 = loss_l1(&out.color, &batch.target)?;
    let (ssim_l, ssim_g) = if want_grad {
        let (l, g) = loss_ssim_grad(&out.color, &batch.target)?;
        (l, Some(g))
    } else {
        (loss_ssim(&out.color, &batch.target)?, None)
    };
    let (depth_l, depth_g) = match &batch.target_depth {
        Some(t) => match loss_depth_grad(&out.depth, t) {
            Ok((l, g)) => (l, Some(g)),
            // nothing rendered where the target has depth: the term is empty
            Err(OptimizeError::NoValidDepth) => (0.0, None),
            Err(e) => return Err(e),
        },
        None => (0.0, None),
    };
    let loss = LossBreakdown::assemble(weights, l1, ssim_l, depth_l, lambda_depth);
    if !loss.total.is_finite() {
        return Err(OptimizeError::NonFinite("loss".into()));
    }
    if !want_grad {
        return Ok((loss, None));
    }
    let mut gc = loss_l1_grad(&out.color, &batch.target);
    let sg = ssim_g.expect("computed");
    for (o, s) in gc.as_mut_slice().iter_mut().zip(sg.as_slice()) {
        for c in 0..3 {
            o[c] = weights.lambda1 * o[c] + weights.lambda_ssim * s[c];
        }
    }
    let gd = depth_g.map(|g| g.map(|v| v * lambda_depth));
    let grad = render_backward(scene, &batch.camera, settings, times, &gc, gd.as_ref());
    Ok((loss, Some(grad)))
}

// ---------------------------------------------------------------- Adam fit

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStage {
    StaticOnly,
    DynamicOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub iters: usize,
    pub seed: u64,
    /// Scene extent in meters; scales the position learning rates.
    pub extent: f64,
    pub position_lr_init: f64,
    pub position_lr_final: f64,
    /// Velocity learning rate relative to the position learning rate.
    pub velocity_lr_factor: f64,
    pub scale_lr: f64,
    pub rotation_lr: f64,
    pub color_lr: f64,
    pub opacity_lr: f64,
    /// Seconds per step.
    pub t_mu_lr: f64,
    pub t_sigma_lr: f64,
    pub min_t_sigma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub render: RenderSettings,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            seed: 0,
            extent: 1.0,
            position_lr_init: 1.6e-4,
            position_lr_final: 1.6e-6,
            velocity_lr_factor: 1e-2,
            scale_lr: 5e-3,
            rotation_lr: 1e-3,
            color_lr: 2.5e-3,
            opacity_lr: 5e-2,
            t_mu_lr: 1e-5,
            t_sigma_lr: 1e-5,
            min_t_sigma: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            render: RenderSettings::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let positive = [
            ("extent", self.extent),
            ("position_lr_init", self.position_lr_init),
            ("position_lr_final", self.position_lr_final),
            ("epsilon", self.epsilon),
            ("min_t_sigma", self.min_t_sigma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OptimizeError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("velocity_lr_factor", self.velocity_lr_factor),
            ("scale_lr", self.scale_lr),
            ("rotation_lr", self.rotation_lr),
            ("color_lr", self.color_lr),
            ("opacity_lr", self.opacity_lr),
            ("t_mu_lr", self.t_mu_lr),
            ("t_sigma_lr", self.t_sigma_lr),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(OptimizeError::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimizeError::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Position learning rate at `iter`, log-linear from init to final.
    pub fn position_lr(&self, iter: usize) -> f64 {
        let last = self.iters.saturating_sub(1).max(1);
        let f = (iter as f64 / last as f64).min(1.0);
        let (a, b) = (self.position_lr_init.ln(), self.position_lr_final.ln());
        (a + (b - a) * f).exp() * self.extent
    }

    fn learning_rates(&self, iter: usize, dynamic: bool) -> Vec<f64> {
        let pos = self.position_lr(iter);
        let mut lr = vec![0.0; if dynamic { DYNAMIC_PARAMS } else { STATIC_PARAMS }];
        lr[P_POS..P_POS + 3].fill(pos);
        lr[P_LOG_SCALE..P_LOG_SCALE + 3].fill(self.scale_lr);
        lr[P_QUAT..P_QUAT + 4].fill(self.rotation_lr);
        lr[P_COLOR..P_COLOR + 3].fill(self.color_lr);
        lr[P_OPACITY] = self.opacity_lr;
        if dynamic {
            lr[P_T_MU] = self.t_mu_lr;
            lr[P_T_SIGMA] = self.t_sigma_lr;
            lr[P_VEL..P_VEL + 3].fill(pos * self.velocity_lr_factor);
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub scene: GaussianScene,
    pub trace: Vec<LossRecord>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64], stride: usize, cfg: &OptimizerConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr[i % stride] * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Adam over the parameters of the selected stage; the other set is frozen.
/// Batches are visited in seeded shuffled epochs.
pub fn fit(
    scene: &GaussianScene,
    batches: &[TrainBatch],
    weights: &LossWeights,
    stage: FitStage,
    config: &OptimizerConfig,
) -> Result<FitResult, OptimizeError> {
    if batches.is_empty() {
        return Err(OptimizeError::EmptyBatches);
    }
    weights.validate()?;
    config.validate()?;
    for b in batches {
        b.validate()?;
    }
    let mut scene = scene.clone();
    let mut trace = Vec::with_capacity(config.iters);
    if config.iters == 0 {
        return Ok(FitResult { scene, trace });
    }

    let dynamic = stage == FitStage::DynamicOnly;
    let stride = if dynamic { DYNAMIC_PARAMS } else { STATIC_PARAMS };
    let mut params: Vec<f64> = if dynamic {
        scene.dynamics.iter().flat_map(|g| g.to_params()).collect()
    } else {
        scene.statics.iter().flat_map(|g| g.to_params()).collect()
    };
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();

    for iter in 0..config.iters {
        if order.is_empty() {
            order = (0..batches.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let batch = &batches[order.pop().expect("refilled")];
        let (loss, grad) = loss_and_gradient(&scene, batch, weights, iter, &config.render)?;
        trace.push(LossRecord { iter, loss });

        let flat: Vec<f64> = if dynamic {
            grad.dynamics.iter().flatten().copied().collect()
        } else {
            grad.statics.iter().flatten().copied().collect()
        };
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(OptimizeError::NonFinite(format!("gradient at iteration {iter}")));
        }
        let lr = config.learning_rates(iter, dynamic);
        adam.update(&mut params, &flat, &lr, stride, config);

        for (k, chunk) in params.chunks_mut(stride).enumerate() {
            for c in 0..3 {
                chunk[P_COLOR + c] = chunk[P_COLOR + c].clamp(0.0, 1.0);
            }
            if dynamic {
                chunk[P_T_SIGMA] = chunk[P_T_SIGMA].max(config.min_t_sigma);
                let mut g = DynamicGaussian::from_params(chunk);
                g.base.normalize_rotation();
                chunk.copy_from_slice(&g.to_params());
                scene.dynamics[k] = g;
            } else {
                let mut g = StaticGaussian::from_params(chunk);
                g.normalize_rotation();
                chunk.copy_from_slice(&g.to_params());
                scene.statics[k] = g;
            }
        }
    }
    Ok(FitResult { scene, trace })
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub dynamic: bool,
    pub index: usize,
    pub param: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamSelection {
    All,
    Random { count: usize, seed: u64 },
    Explicit(Vec<ParamRef>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEntry {
    pub param: ParamRef,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradientEntry>,
}

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / (a.abs() + f.abs()).max(1e-8)
}

fn all_params(scene: &GaussianScene) -> Vec<ParamRef> {
    let mut v = Vec::new();
    for index in 0..scene.statics.len() {
        for param in 0..STATIC_PARAMS {
            v.push(ParamRef {
                dynamic: false,
                index,
                param,
            });
        }
    }
    for index in 0..scene.dynamics.len() {
        for param in 0..DYNAMIC_PARAMS {
            v.push(ParamRef {
                dynamic: true,
                index,
                param,
            });
        }
    }
    v
}

fn perturbed(scene: &GaussianScene, p: ParamRef, delta: f64) -> GaussianScene {
    let mut s = scene.clone();
    if p.dynamic {
        let mut v = s.dynamics[p.index].to_params();
        v[p.param] += delta;
        s.dynamics[p.index] = DynamicGaussian::from_params(&v);
    } else {
        let mut v = s.statics[p.index].to_params();
        v[p.param] += delta;
        s.statics[p.index] = StaticGaussian::from_params(&v);
    }
    s
}

/// Central-difference check of the analytic gradient of the total loss at
/// iteration 0 with default weights.
pub fn gradient_check(
    scene: &GaussianScene,
    batch: &TrainBatch,
    selection: &ParamSelection,
    eps: f64,
) -> Result<GradientCheckReport, OptimizeError> {
    gradient_check_with(scene, batch, &LossWeights::default(), selection, eps)
}

/// The reference is a central difference at `eps`, Richardson-extrapolated
/// with the one at `2 eps`. Renders run without culling or early termination, and both the capture
/// times and the set of pixels with valid rendered depth are frozen at the
/// unperturbed values, so the objective is smooth in every parameter.
pub fn gradient_check_with(
    scene: &GaussianScene,
    batch: &TrainBatch,
    weights: &LossWeights,
    selection: &ParamSelection,
    eps: f64,
) -> Result<GradientCheckReport, OptimizeError> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(OptimizeError::InvalidConfig(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    batch.validate()?;
    weights.validate()?;
    let settings = RenderSettings::exact();
    let times = effective_times(scene, &batch.request(), &settings);
    let depth_valid = render_at_times(scene, &batch.camera, &settings, &times).depth.valid;
    let (_, grad) = evaluate(scene, batch, weights, 0, &settings, &times, Some(&depth_valid), true)?;
    let grad = grad.expect("requested");

    let params = match selection {
        ParamSelection::All => all_params(scene),
        ParamSelection::Random { count, seed } => {
            let mut all = all_params(scene);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            all.shuffle(&mut rng);
            all.truncate(*count);
            all
        }
        ParamSelection::Explicit(v) => v.clone(),
    };

    let loss_at = |s: &GaussianScene| -> Result<f64, OptimizeError> {
        Ok(evaluate(s, batch, weights, 0, &settings, &times, Some(&depth_valid), false)?.0.total)
    };
    let mut entries = Vec::with_capacity(params.len());
    let mut worst: f64 = 0.0;
    for p in params {
        let len = if p.dynamic { scene.dynamics.len() } else { scene.statics.len() };
        if p.index >= len || p.param >= if p.dynamic { DYNAMIC_PARAMS } else { STATIC_PARAMS } {
            return Err(OptimizeError::InvalidConfig(format!("no such parameter {p:?}")));
        }
        let central = |h: f64| -> Result<f64, OptimizeError> {
            Ok((loss_at(&perturbed(scene, p, h))? - loss_at(&perturbed(scene, p, -h))?) / (2.0 * h))
        };
        // Richardson step: cancels the eps^2 truncation term, which otherwise
        // dominates for small gradients of strongly curved parameters
        let numeric = (4.0 * central(eps)? - central(2.0 * eps)?) / 3.0;
        let analytic = if p.dynamic {
            grad.dynamics[p.index][p.param]
        } else {
            grad.statics[p.index][p.param]
        };
        let rel_error = relative_error(analytic, numeric);
        worst = worst.max(rel_error);
        entries.push(GradientEntry {
            param: p,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradientCheckReport {
        max_rel_error: worst,
        entries,
    })
}

/// Uniform random index helper shared by callers that need reproducible
/// sub-sampling.
pub fn seeded_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen_range(0..n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose, ReadoutSchedule};
    use nalgebra::{Quaternion, Vector3};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Raster::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn l1_examples() {
        let z = Raster::filled(4, 4, [0.0; 3]);
        let o = Raster::filled(4, 4, [1.0; 3]);
        assert_eq!(loss_l1(&z, &z).unwrap(), 0.0);
        assert_eq!(loss_l1(&z, &o).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (rand_image(&mut rng, 7, 5), rand_image(&mut rng, 7, 5));
        let mut s = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                for c in 0..3 {
                    s += (a.get(x, y)[c] - b.get(x, y)[c]).abs();
                }
            }
        }
        assert!((loss_l1(&a, &b).unwrap() - s / 105.0).abs() < 1e-12);
        assert!(loss_l1(&a, &Raster::filled(7, 4, [0.0; 3])).is_err());
    }

    /// Direct windowed SSIM: explicit 2D Gaussian weights per position.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (w, h) = a.shape();
        let mut k2 = [[0.0; 11]; 11];
        let mut sum = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                sum += *v;
            }
        }
        let mut total = 0.0;
        let mut n = 0;
        for c in 0..3 {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k2[i][j] / sum;
                            let p = a.get(x + j, y + i)[c];
                            let q = b.get(x + j, y + i)[c];
                            mx += wgt * p;
                            my += wgt * q;
                            sxx += wgt * p * p;
                            syy += wgt * q * q;
                            sxy += wgt * p * q;
                        }
                    }
                    sxx -= mx * mx;
                    syy -= my * my;
                    sxy -= mx * my;
                    total += (2.0 * mx * my + 1e-4) * (2.0 * sxy + 9e-4)
                        / ((mx * mx + my * my + 1e-4) * (sxx + syy + 9e-4));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_image(&mut rng, 16, 13);
        assert!(loss_ssim(&a, &a).unwrap().abs() < 1e-9);
        let b = rand_image(&mut rng, 16, 13);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);

        let checker = Raster::from_fn(16, 16, |x, y| [((x + y) % 2) as f64; 3]);
        let neg = checker.map(|p| p.map(|v| 1.0 - v));
        let l = loss_ssim(&checker, &neg).unwrap();
        assert!(l >= 0.9 && l <= 2.0, "{l}");
        assert_eq!(
            loss_ssim(&Raster::filled(10, 20, [0.0; 3]), &Raster::filled(10, 20, [0.0; 3])),
            Err(OptimizeError::ImageTooSmall(10, 20))
        );
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_image(&mut rng, 14, 12);
        let b = rand_image(&mut rng, 14, 12);
        let (l, g) = loss_ssim_grad(&a, &b).unwrap();
        assert!((l - loss_ssim(&a, &b).unwrap()).abs() < 1e-12);
        let eps = 1e-6;
        for &(x, y, c) in &[(0, 0, 0), (5, 5, 1), (13, 11, 2), (7, 3, 0), (10, 8, 2)] {
            let mut p = a.clone();
            p.get_mut(x, y)[c] += eps;
            let mut m = a.clone();
            m.get_mut(x, y)[c] -= eps;
            let fd = (loss_ssim(&p, &b).unwrap() - loss_ssim(&m, &b).unwrap()) / (2.0 * eps);
            let an = g.get(x, y)[c];
            assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "({x},{y},{c}) {an} vs {fd}");
        }
    }

    #[test]
    fn depth_examples() {
        let a = DepthMap::constant(5, 5, 2.0);
        assert_eq!(loss_depth(&a, &a).unwrap(), 0.0);
        assert!((loss_depth(&a, &DepthMap::constant(5, 5, 2.5)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            loss_depth(&a, &DepthMap::invalid(5, 5)),
            Err(OptimizeError::NoValidDepth)
        );
    }

    #[test]
    fn schedule_examples() {
        let w = LossWeights::with_iters(101);
        assert_eq!(depth_weight_schedule(0, &w), 100.0);
        assert_eq!(depth_weight_schedule(100, &w), 1.0);
        assert!((depth_weight_schedule(50, &w) - 10.0).abs() < 1e-9);
        for i in 0..100 {
            assert!(depth_weight_schedule(i + 1, &w) < depth_weight_schedule(i, &w));
        }
    }

    fn breakdown_identity(b: &LossBreakdown, w: &LossWeights) -> f64 {
        w.lambda1 * b.l1 + w.lambda_ssim * b.ssim + b.lambda_depth * b.depth
    }

    #[test]
    fn weighted_sum_example() {
        let w = LossWeights::default();
        let b = LossBreakdown::assemble(&w, 0.1, 0.2, 0.0, 0.0);
        assert!((b.total - 0.12).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn losses_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_image(&mut rng, 12, 12);
            let b = rand_image(&mut rng, 12, 12);
            prop_assert_eq!(loss_l1(&a, &b).unwrap(), loss_l1(&b, &a).unwrap());
            prop_assert!((loss_ssim(&a, &b).unwrap() - loss_ssim(&b, &a).unwrap()).abs() < 1e-9);
            let da = DepthMap::new(Raster::from_fn(6, 6, |_, _| rng.gen_range(0.5..3.0)));
            let db = DepthMap::new(Raster::from_fn(6, 6, |_, _| rng.gen_range(0.5..3.0)));
            prop_assert_eq!(loss_depth(&da, &db).unwrap(), loss_depth(&db, &da).unwrap());
        }
    }

    fn probe_camera(w: usize, h: usize) -> Camera {
        Camera::new(
            Intrinsics::new(20.0, 20.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap(),
            Pose::identity(),
            ReadoutSchedule::global(),
        )
    }

    fn probe_scene() -> GaussianScene {
        let mut g = StaticGaussian::isotropic(Vector3::new(0.05, -0.03, 2.0), 0.15, [0.8, 0.4, 0.2], 0.7);
        g.log_scale = Vector3::new(-1.9, -2.2, -1.7);
        g.rotation = Quaternion::new(0.9, 0.2, -0.3, 0.1);
        g.normalize_rotation();
        let d = DynamicGaussian {
            base: StaticGaussian {
                position: Vector3::new(-0.1, 0.1, 1.8),
                color: [0.3, 0.7, 0.9],
                ..g
            },
            t_mu: 0.004,
            t_sigma: 0.006,
            velocity: Vector3::new(1.0, -2.0, 0.5),
        };
        GaussianScene::new(vec![g], vec![d], [0.1, 0.1, 0.1])
    }

    #[test]
    fn perfect_render_has_zero_loss() {
        let scene = probe_scene();
        let cam = probe_camera(20, 18);
        let out = crate::splatrender::render(&scene, &RenderRequest::global(cam, 0.0));
        let mut batch = TrainBatch::new(cam, out.color.clone(), 0.0);
        batch.target_depth = Some(out.depth.clone());
        let w = LossWeights::with_iters(10);
        let l = total_loss(&scene, &batch, &w, 3).unwrap();
        assert!(l.total.abs() < 1e-9, "{l:?}");
        assert!((breakdown_identity(&l, &w) - l.total).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_probe() {
        let scene = probe_scene();
        let cam = probe_camera(20, 18);
        let target = Raster::from_fn(20, 18, |x, y| [0.02 * x as f64, 0.03 * y as f64, 0.5]);
        let mut batch = TrainBatch::new(cam, target, 0.0);
        // below every rendered depth, so |D - target| has no kink
        batch.target_depth = Some(DepthMap::constant(20, 18, 1.5));
        let r = gradient_check(&scene, &batch, &ParamSelection::All, 1e-4).unwrap();
        let worst = r.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
        assert!(r.max_rel_error < 1e-3, "{worst:?}");
    }

    #[test]
    fn gradient_check_without_coverage_is_zero() {
        let mut scene = probe_scene();
        scene.statics[0].position.z = -3.0;
        scene.dynamics.clear();
        let cam = probe_camera(16, 16);
        let batch = TrainBatch::new(cam, Raster::filled(16, 16, [0.5; 3]), 0.0);
        let r = gradient_check(&scene, &batch, &ParamSelection::All, 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.entries.iter().all(|e| e.analytic == 0.0));
    }

    #[test]
    fn t_sigma_gradient_matches_closed_form() {
        // One big flat dynamic Gaussian in front of black: at the center pixel
        // the color is c * o * tau * G, so dL/dt_sigma follows from d tau.
        let cam = probe_camera(16, 16);
        let d = DynamicGaussian {
            base: StaticGaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.5, [1.0, 1.0, 1.0], 0.5),
            t_mu: 0.0,
            t_sigma: 0.01,
            velocity: Vector3::zeros(),
        };
        let scene = GaussianScene::new(vec![], vec![d], [0.0; 3]);
        let t = 0.012;
        let batch = TrainBatch::new(cam, Raster::filled(16, 16, [1.0; 3]), t);
        let w = LossWeights {
            lambda_ssim: 0.0,
            lambda1: 1.0,
            ..LossWeights::default()
        };
        let r = gradient_check_with(
            &scene,
            &batch,
            &w,
            &ParamSelection::Explicit(vec![ParamRef {
                dynamic: true,
                index: 0,
                param: P_T_SIGMA,
            }]),
            1e-6,
        )
        .unwrap();
        // L = mean over pixels of (1 - o tau G) => dL/dsigma = -mean(o G) dtau/dsigma
        let out = crate::splatrender::render_at_times(&scene, &cam, &RenderSettings::exact(), &[Some(t)]);
        let tau = (-0.5f64 * (t / 0.01).powi(2)).exp();
        let dtau = tau * t * t / 0.01f64.powi(3);
        let mean_og: f64 = out.alpha.as_slice().iter().sum::<f64>() / 256.0 / tau;
        let closed = -mean_og * dtau;
        let e = r.entries[0];
        assert!(relative_error(e.analytic, closed) < 1e-3, "{e:?} vs {closed}");
        assert!(e.rel_error < 1e-3);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let scene = probe_scene();
        let cam = probe_camera(16, 16);
        let batch = TrainBatch::new(cam, Raster::filled(16, 16, [0.5; 3]), 0.0);
        let cfg = OptimizerConfig {
            iters: 0,
            ..OptimizerConfig::default()
        };
        let r = fit(&scene, &[batch], &LossWeights::default(), FitStage::StaticOnly, &cfg).unwrap();
        assert_eq!(r.scene, scene);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn color_converges_on_toy_problem() {
        let cam = probe_camera(24, 24);
        let truth = StaticGaussian::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.3, [0.2, 0.7, 0.4], 0.99);
        let target = crate::splatrender::render(
            &GaussianScene::new(vec![truth], vec![], [0.0; 3]),
            &RenderRequest::global(cam, 0.0),
        )
        .color;
        let start = StaticGaussian {
            color: [0.9, 0.1, 0.9],
            ..truth
        };
        let scene = GaussianScene::new(vec![start], vec![], [0.0; 3]);
        let cfg = OptimizerConfig {
            iters: 500,
            color_lr: 1e-2,
            position_lr_init: 1e-12,
            position_lr_final: 1e-12,
            scale_lr: 0.0,
            rotation_lr: 0.0,
            opacity_lr: 0.0,
            ..OptimizerConfig::default()
        };
        let r = fit(&scene, &[TrainBatch::new(cam, target, 0.0)], &LossWeights::with_iters(500), FitStage::StaticOnly, &cfg)
            .unwrap();
        for c in 0..3 {
            assert!((r.scene.statics[0].color[c] - truth.color[c]).abs() < 1e-2, "{:?}", r.scene.statics[0].color);
        }
    }

    #[test]
    fn stages_freeze_the_other_set() {
        let scene = probe_scene();
        let cam = probe_camera(16, 16);
        let batch = TrainBatch::new(cam, Raster::filled(16, 16, [0.5; 3]), 0.002);
        let cfg = OptimizerConfig {
            iters: 5,
            ..OptimizerConfig::default()
        };
        let w = LossWeights::with_iters(5);
        let d = fit(&scene, std::slice::from_ref(&batch), &w, FitStage::DynamicOnly, &cfg).unwrap();
        assert_eq!(d.scene.statics, scene.statics);
        assert_ne!(d.scene.dynamics, scene.dynamics);
        let s = fit(&scene, &[batch], &w, FitStage::StaticOnly, &cfg).unwrap();
        assert_eq!(s.scene.dynamics, scene.dynamics);
        assert_ne!(s.scene.statics, scene.statics);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let scene = probe_scene();
        let cfg = OptimizerConfig::default();
        assert!(matches!(
            fit(&scene, &[], &LossWeights::default(), FitStage::StaticOnly, &cfg),
            Err(OptimizeError::EmptyBatches)
        ));
    }

    #[test]
    fn position_lr_decays_log_linearly() {
        let cfg = OptimizerConfig {
            iters: 101,
            extent: 2.0,
            ..OptimizerConfig::default()
        };
        assert!((cfg.position_lr(0) - 3.2e-4).abs() < 1e-18);
        assert!((cfg.position_lr(100) - 3.2e-6).abs() < 1e-18);
        assert!((cfg.position_lr(50) - 3.2e-5).abs() < 1e-15);
    }
}
