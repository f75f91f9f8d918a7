//! CPU splat renderer with temporal opacity, rolling-shutter timing and a
//! hand-derived backward pass.
//!
//! Gaussians are projected with the first-order (Jacobian) covariance
//! approximation, dilated by `dilation` px² on the diagonal, sorted by
//! camera-frame depth (ties by index: statics first, then dynamics) and
//! composited front to back. Work is split into 16x16 tiles; each pixel is
//! composited sequentially, so the thread count never changes results.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::gaussians::{
    quat_to_matrix, sigmoid, temporal_opacity, DynamicGaussian, GaussianScene, StaticGaussian,
    DYNAMIC_PARAMS, P_COLOR, P_LOG_SCALE, P_OPACITY, P_POS, P_QUAT, P_T_MU, P_T_SIGMA, P_VEL,
    STATIC_PARAMS,
};
use crate::raster::{DepthMap, Image, Raster, ScalarMap};

const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShutterMode {
    #[default]
    Global,
    Rolling,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderRequest {
    pub camera: Camera,
    /// Frame-start time in seconds.
    pub time: f64,
    pub shutter: ShutterMode,
}

impl RenderRequest {
    pub fn global(camera: Camera, time: f64) -> Self {
        Self {
            camera,
            time,
            shutter: ShutterMode::Global,
        }
    }

    pub fn rolling(camera: Camera, time: f64) -> Self {
        Self {
            camera,
            time,
            shutter: ShutterMode::Rolling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Added to the projected covariance diagonal, px².
    pub dilation: f64,
    /// Per-pixel contributions below this alpha are skipped; also sets the
    /// splat footprint. Zero disables culling.
    pub min_alpha: f64,
    /// Compositing stops once transmittance drops below this. Zero disables.
    pub min_transmittance: f64,
    /// Depth is reported only where accumulated alpha reaches this.
    pub depth_min_alpha: f64,
    /// Camera-frame depth below which Gaussians are dropped.
    pub near: f64,
    /// Use the full readout-time correction instead of `t(p0)`.
    pub exact_rolling: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            min_alpha: 1e-6,
            min_transmittance: 1e-4,
            depth_min_alpha: 1e-3,
            near: 0.01,
            exact_rolling: false,
        }
    }
}

impl RenderSettings {
    /// No culling and no early termination: the composited set of Gaussians
    /// does not depend on parameter values, which finite differences need.
    pub fn exact() -> Self {
        Self {
            min_alpha: 0.0,
            min_transmittance: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    /// Alpha-normalized expected depth.
    pub depth: DepthMap,
    pub alpha: ScalarMap,
}

/// Capture time of dynamic Gaussian `g` under `req`, or `None` when its
/// position at the frame start is behind the camera.
pub fn effective_capture_time(req: &RenderRequest, g: &DynamicGaussian) -> Option<f64> {
    capture_time(req, g, false)
}

/// Like [`effective_capture_time`] but with the image-velocity correction
/// `t(p0) / (1 - grad t . v_image)`.
pub fn effective_capture_time_exact(req: &RenderRequest, g: &DynamicGaussian) -> Option<f64> {
    capture_time(req, g, true)
}

fn capture_time(req: &RenderRequest, g: &DynamicGaussian, exact: bool) -> Option<f64> {
    if req.shutter == ShutterMode::Global {
        return Some(req.time);
    }
    let cam = &req.camera;
    let pc = cam.world_to_camera(&g.position_at(req.time));
    if !(pc.z > 0.0) {
        return None;
    }
    let p0 = cam.project_camera_point(&pc);
    let delay = cam.pixel_delay(&p0);
    if !exact {
        return Some(req.time + delay);
    }
    let j = projection_jacobian(cam, &pc);
    let v_image = j * (cam.pose.rotation() * g.velocity);
    let denom = 1.0 - cam.readout.delay_gradient(&p0, cam.height()).dot(&v_image);
    if denom <= 0.0 {
        return None;
    }
    Some(req.time + delay / denom)
}

/// Effective capture time of every dynamic Gaussian.
pub fn effective_times(
    scene: &GaussianScene,
    req: &RenderRequest,
    settings: &RenderSettings,
) -> Vec<Option<f64>> {
    scene
        .dynamics
        .iter()
        .map(|g| capture_time(req, g, settings.exact_rolling))
        .collect()
}

pub fn render(scene: &GaussianScene, req: &RenderRequest) -> RenderOutput {
    render_with(scene, req, &RenderSettings::default())
}

/// Render with each dynamic Gaussian placed at its rolling-shutter capture time.
pub fn render_rolling(scene: &GaussianScene, req: &RenderRequest) -> RenderOutput {
    let req = RenderRequest {
        shutter: ShutterMode::Rolling,
        ..*req
    };
    render_with(scene, &req, &RenderSettings::default())
}

pub fn render_with(
    scene: &GaussianScene,
    req: &RenderRequest,
    settings: &RenderSettings,
) -> RenderOutput {
    let times = effective_times(scene, req, settings);
    render_at_times(scene, &req.camera, settings, &times)
}

/// Render with caller-provided capture times for the dynamic Gaussians
/// (`None` excludes a Gaussian).
pub fn render_at_times(
    scene: &GaussianScene,
    camera: &Camera,
    settings: &RenderSettings,
    times: &[Option<f64>],
) -> RenderOutput {
    let prep = prepare(scene, camera, settings, times);
    let (w, h) = (camera.width(), camera.height());
    let tiles: Vec<Vec<[f64; 5]>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|ti| {
            let (x0, y0, x1, y1) = prep.tile_rect(ti);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push(shade_pixel(&prep, &prep.tiles[ti], x, y, scene.background, settings));
                }
            }
            out
        })
        .collect();

    let mut color = Raster::filled(w, h, [0.0; 3]);
    let mut depth = Raster::filled(w, h, 0.0);
    let mut valid = Raster::filled(w, h, false);
    let mut alpha = Raster::filled(w, h, 0.0);
    for (ti, px) in tiles.iter().enumerate() {
        let (x0, y0, x1, y1) = prep.tile_rect(ti);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let [r, g, b, a, n] = px[k];
                k += 1;
                color.set(x, y, [r, g, b]);
                alpha.set(x, y, a);
                if a > 0.0 {
                    depth.set(x, y, n / a);
                    valid.set(x, y, a >= settings.depth_min_alpha);
                }
            }
        }
    }
    RenderOutput {
        color,
        depth: DepthMap::with_mask(depth, valid).expect("same shape"),
        alpha,
    }
}

/// Per-parameter loss gradients in the packed layouts of
/// [`StaticGaussian::to_params`] and [`DynamicGaussian::to_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradient {
    pub statics: Vec<[f64; STATIC_PARAMS]>,
    pub dynamics: Vec<[f64; DYNAMIC_PARAMS]>,
}

impl SceneGradient {
    pub fn zeros(scene: &GaussianScene) -> Self {
        Self {
            statics: vec![[0.0; STATIC_PARAMS]; scene.statics.len()],
            dynamics: vec![[0.0; DYNAMIC_PARAMS]; scene.dynamics.len()],
        }
    }

    pub fn add_assign(&mut self, other: &SceneGradient) {
        for (a, b) in self.statics.iter_mut().zip(&other.statics) {
            for k in 0..STATIC_PARAMS {
                a[k] += b[k];
            }
        }
        for (a, b) in self.dynamics.iter_mut().zip(&other.dynamics) {
            for k in 0..DYNAMIC_PARAMS {
                a[k] += b[k];
            }
        }
    }
}

/// Backward pass: given dL/dcolor per pixel and optionally dL/ddepth, returns
/// dL/dparams. The depth gradient must be zero where the rendered depth is
/// not valid.
///
/// Capture times are treated as constants.
pub fn render_backward(
    scene: &GaussianScene,
    camera: &Camera,
    settings: &RenderSettings,
    times: &[Option<f64>],
    grad_color: &Raster<[f64; 3]>,
    grad_depth: Option<&Raster<f64>>,
) -> SceneGradient {
    let prep = prepare(scene, camera, settings, times);
    assert_eq!(grad_color.shape(), (camera.width(), camera.height()));
    if let Some(gd) = grad_depth {
        assert_eq!(gd.shape(), grad_color.shape());
    }
    let partials: Vec<Vec<SplatGrad>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|ti| {
            let list = &prep.tiles[ti];
            let mut acc = vec![SplatGrad::default(); list.len()];
            let mut contribs = Vec::new();
            let (x0, y0, x1, y1) = prep.tile_rect(ti);
            for y in y0..y1 {
                for x in x0..x1 {
                    let gc = *grad_color.get(x, y);
                    let gd = grad_depth.map_or(0.0, |g| *g.get(x, y));
                    backward_pixel(
                        &prep,
                        list,
                        x,
                        y,
                        scene.background,
                        settings,
                        gc,
                        gd,
                        &mut contribs,
                        &mut acc,
                    );
                }
            }
            acc
        })
        .collect();

    // fixed-order reduction, independent of scheduling
    let mut total = vec![SplatGrad::default(); prep.splats.len()];
    for (ti, acc) in partials.iter().enumerate() {
        for (slot, g) in prep.tiles[ti].iter().zip(acc) {
            total[*slot as usize].add(g);
        }
    }

    let mut out = SceneGradient::zeros(scene);
    let chained: Vec<(usize, [f64; DYNAMIC_PARAMS])> = prep
        .splats
        .par_iter()
        .zip(total.par_iter())
        .map(|(s, g)| (s.id, chain_to_params(s, g, camera)))
        .collect();
    let ns = scene.statics.len();
    for (id, p) in chained {
        if id < ns {
            out.statics[id].copy_from_slice(&p[..STATIC_PARAMS]);
        } else {
            out.dynamics[id - ns] = p;
        }
    }
    out
}

/// A Gaussian projected into one view.
struct Splat {
    id: usize,
    mean: Vector2<f64>,
    conic: [f64; 3],
    depth: f64,
    /// Base opacity times temporal factor.
    weight: f64,
    color: [f64; 3],
    bbox: (usize, usize, usize, usize),
    // backward state
    pc: Vector3<f64>,
    cov_cam: Matrix3<f64>,
    jac: Matrix2x3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
    quat: Quaternion<f64>,
    sig: f64,
    temporal: f64,
    dt: f64,
    dynamic: Option<DynamicGaussian>,
}

struct Prepared {
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    width: usize,
    height: usize,
}

impl Prepared {
    fn tile_rect(&self, ti: usize) -> (usize, usize, usize, usize) {
        let tx = ti % self.tiles_x;
        let ty = ti / self.tiles_x;
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        (x0, y0, (x0 + TILE).min(self.width), (y0 + TILE).min(self.height))
    }
}

#[inline]
fn projection_jacobian(camera: &Camera, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let k = &camera.intrinsics;
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * pc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * pc.y * iz * iz,
    )
}

fn project_one(
    id: usize,
    g: &StaticGaussian,
    position: Vector3<f64>,
    temporal: f64,
    dt: f64,
    dynamic: Option<DynamicGaussian>,
    camera: &Camera,
    settings: &RenderSettings,
) -> Option<Splat> {
    let pc = camera.world_to_camera(&position);
    if !(pc.z > settings.near) {
        return None;
    }
    let sig = sigmoid(g.opacity_logit);
    let weight = sig * temporal;
    if !(weight > 0.0) || weight < settings.min_alpha {
        return None;
    }
    let rot = quat_to_matrix(&g.rotation);
    let scale = g.log_scale.map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&scale);
    let w = camera.pose.rotation();
    let cov_cam = w * (m * m.transpose()) * w.transpose();
    let jac = projection_jacobian(camera, &pc);
    let cov2 = jac * cov_cam * jac.transpose() + Matrix2::identity() * settings.dilation;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov2[(1, 1)] / det, -cov2[(0, 1)] / det, cov2[(0, 0)] / det];
    let mean = camera.project_camera_point(&pc);

    let (wd, ht) = (camera.width(), camera.height());
    let bbox = if settings.min_alpha > 0.0 {
        let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
        let lmax = mid + (mid * mid - det).max(0.0).sqrt();
        let r = (2.0 * (weight / settings.min_alpha).ln() * lmax).sqrt();
        let xa = (mean.x - r).ceil().max(0.0);
        let xb = (mean.x + r).floor().min((wd - 1) as f64);
        let ya = (mean.y - r).ceil().max(0.0);
        let yb = (mean.y + r).floor().min((ht - 1) as f64);
        if !(xa <= xb && ya <= yb) {
            return None;
        }
        (xa as usize, xb as usize, ya as usize, yb as usize)
    } else {
        (0, wd - 1, 0, ht - 1)
    };

    Some(Splat {
        id,
        mean,
        conic,
        depth: pc.z,
        weight,
        color: g.color,
        bbox,
        pc,
        cov_cam,
        jac,
        rot,
        scale,
        quat: g.rotation,
        sig,
        temporal,
        dt,
        dynamic,
    })
}

fn prepare(
    scene: &GaussianScene,
    camera: &Camera,
    settings: &RenderSettings,
    times: &[Option<f64>],
) -> Prepared {
    assert_eq!(times.len(), scene.dynamics.len(), "one time per dynamic Gaussian");
    let ns = scene.statics.len();
    let mut splats: Vec<Splat> = scene
        .statics
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_one(i, g, g.position, 1.0, 0.0, None, camera, settings))
        .collect();
    let dynamic: Vec<Splat> = scene
        .dynamics
        .par_iter()
        .zip(times.par_iter())
        .enumerate()
        .filter_map(|(i, (g, t))| {
            let t = (*t)?;
            project_one(
                ns + i,
                &g.base,
                g.position_at(t),
                temporal_opacity(g, t),
                t - g.t_mu,
                Some(*g),
                camera,
                settings,
            )
        })
        .collect();
    splats.extend(dynamic);
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));

    let (w, h) = (camera.width(), camera.height());
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        let (xa, xb, ya, yb) = s.bbox;
        for ty in ya / TILE..=yb / TILE {
            for tx in xa / TILE..=xb / TILE {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Prepared {
        splats,
        tiles,
        tiles_x,
        width: w,
        height: h,
    }
}

#[inline]
fn gaussian_at(s: &Splat, x: usize, y: usize) -> (f64, f64, f64) {
    let dx = x as f64 - s.mean.x;
    let dy = y as f64 - s.mean.y;
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    (power.min(0.0).exp(), dx, dy)
}

/// Returns `[r, g, b, alpha, alpha-weighted depth]`.
fn shade_pixel(
    prep: &Prepared,
    list: &[u32],
    x: usize,
    y: usize,
    background: [f64; 3],
    settings: &RenderSettings,
) -> [f64; 5] {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    let mut n = 0.0;
    for &k in list {
        let s = &prep.splats[k as usize];
        let (xa, xb, ya, yb) = s.bbox;
        if x < xa || x > xb || y < ya || y > yb {
            continue;
        }
        let (g, _, _) = gaussian_at(s, x, y);
        let a = s.weight * g;
        if a < settings.min_alpha || a <= 0.0 {
            continue;
        }
        let ta = t * a;
        for ch in 0..3 {
            c[ch] += ta * s.color[ch];
        }
        n += ta * s.depth;
        t *= 1.0 - a;
        if t < settings.min_transmittance {
            break;
        }
    }
    [
        c[0] + t * background[0],
        c[1] + t * background[1],
        c[2] + t * background[2],
        1.0 - t,
        n,
    ]
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    weight: f64,
    depth: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.weight += o.weight;
        self.depth += o.depth;
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    g: f64,
    dx: f64,
    dy: f64,
    t: f64,
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    prep: &Prepared,
    list: &[u32],
    x: usize,
    y: usize,
    background: [f64; 3],
    settings: &RenderSettings,
    gc: [f64; 3],
    gd: f64,
    contribs: &mut Vec<Contribution>,
    acc: &mut [SplatGrad],
) {
    contribs.clear();
    let mut t = 1.0;
    let mut n = 0.0;
    for (slot, &k) in list.iter().enumerate() {
        let s = &prep.splats[k as usize];
        let (xa, xb, ya, yb) = s.bbox;
        if x < xa || x > xb || y < ya || y > yb {
            continue;
        }
        let (g, dx, dy) = gaussian_at(s, x, y);
        let a = s.weight * g;
        if a < settings.min_alpha || a <= 0.0 {
            continue;
        }
        contribs.push(Contribution {
            slot,
            alpha: a,
            g,
            dx,
            dy,
            t,
        });
        n += t * a * s.depth;
        t *= 1.0 - a;
        if t < settings.min_transmittance {
            break;
        }
    }
    if contribs.is_empty() {
        return;
    }
    let acc_alpha = 1.0 - t;
    // callers zero `gd` wherever the rendered depth is not used
    let depth_on = gd != 0.0 && acc_alpha > 0.0;
    let depth = if depth_on { n / acc_alpha } else { 0.0 };

    // suffix state: color behind (background-terminated), depth behind,
    // transmittance product behind
    let mut rear = background;
    let mut rear_z = 0.0;
    let mut rear_t = 1.0;
    for c in contribs.iter().rev() {
        let s = &prep.splats[list[c.slot] as usize];
        let a = c.alpha;
        let mut dl_da = 0.0;
        for ch in 0..3 {
            dl_da += gc[ch] * c.t * (s.color[ch] - rear[ch]);
        }
        let out = &mut acc[c.slot];
        if depth_on {
            let dn_da = c.t * (s.depth - rear_z);
            let dacc_da = c.t * rear_t;
            dl_da += gd * (dn_da - depth * dacc_da) / acc_alpha;
            out.depth += gd * c.t * a / acc_alpha;
        }
        for ch in 0..3 {
            out.color[ch] += gc[ch] * c.t * a;
        }
        out.weight += dl_da * c.g;
        let dpower = dl_da * s.weight * c.g;
        let [qa, qb, qc] = s.conic;
        out.mean[0] += dpower * (qa * c.dx + qb * c.dy);
        out.mean[1] += dpower * (qb * c.dx + qc * c.dy);
        out.conic[0] += dpower * (-0.5 * c.dx * c.dx);
        out.conic[1] += dpower * (-c.dx * c.dy);
        out.conic[2] += dpower * (-0.5 * c.dy * c.dy);

        for ch in 0..3 {
            rear[ch] = s.color[ch] * a + (1.0 - a) * rear[ch];
        }
        rear_z = s.depth * a + (1.0 - a) * rear_z;
        rear_t *= 1.0 - a;
    }
}

/// d rotation-matrix -> d (unnormalized) quaternion.
fn quat_backward(q: &Quaternion<f64>, gr: &Matrix3<f64>) -> [f64; 4] {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    let g = |r: usize, c: usize| gr[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    // through q / |q|
    let dot = w * dw + x * dx + y * dy + z * dz;
    [
        (dw - w * dot) / n,
        (dx - x * dot) / n,
        (dy - y * dot) / n,
        (dz - z * dot) / n,
    ]
}

fn chain_to_params(s: &Splat, g: &SplatGrad, camera: &Camera) -> [f64; DYNAMIC_PARAMS] {
    let k = &camera.intrinsics;
    let (fx, fy) = (k.fx, k.fy);
    let (px, py, pz) = (s.pc.x, s.pc.y, s.pc.z);
    let iz = 1.0 / pz;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    let mut dpc = Vector3::new(
        g.mean[0] * fx * iz,
        g.mean[1] * fy * iz,
        -g.mean[0] * fx * px * iz2 - g.mean[1] * fy * py * iz2 + g.depth,
    );

    // conic -> 2D covariance
    let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let gq = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let dcov2 = -(q * gq * q);
    // 2D covariance -> camera covariance and Jacobian
    let dcov_cam = s.jac.transpose() * dcov2 * s.jac;
    let djac = 2.0 * dcov2 * s.jac * s.cov_cam;
    dpc.x += djac[(0, 2)] * (-fx * iz2);
    dpc.y += djac[(1, 2)] * (-fy * iz2);
    dpc.z += djac[(0, 0)] * (-fx * iz2)
        + djac[(0, 2)] * (2.0 * fx * px * iz3)
        + djac[(1, 1)] * (-fy * iz2)
        + djac[(1, 2)] * (2.0 * fy * py * iz3);

    let w = camera.pose.rotation();
    let dcov = w.transpose() * dcov_cam * w;
    let m = s.rot * Matrix3::from_diagonal(&s.scale);
    let dm = 2.0 * dcov * m;
    let mut drot = dm;
    let mut dlog_scale = [0.0; 3];
    for c in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            ds += s.rot[(r, c)] * dm[(r, c)];
            drot[(r, c)] = dm[(r, c)] * s.scale[c];
        }
        dlog_scale[c] = ds * s.scale[c];
    }
    let dquat = quat_backward(&s.quat, &drot);
    let dpos = w.transpose() * dpc;

    let mut p = [0.0; DYNAMIC_PARAMS];
    for i in 0..3 {
        p[P_POS + i] = dpos[i];
        p[P_LOG_SCALE + i] = dlog_scale[i];
        p[P_COLOR + i] = g.color[i];
    }
    p[P_QUAT..P_QUAT + 4].copy_from_slice(&dquat);
    // weight = sigmoid(logit) * temporal
    p[P_OPACITY] = g.weight * s.temporal * s.sig * (1.0 - s.sig);
    if let Some(d) = &s.dynamic {
        let dtemporal = g.weight * s.sig;
        let dt = s.dt;
        let sigma = d.t_sigma;
        for i in 0..3 {
            p[P_VEL + i] = dt * dpos[i];
        }
        p[P_T_MU] = -d.velocity.dot(&dpos) + dtemporal * s.temporal * dt / (sigma * sigma);
        p[P_T_SIGMA] = dtemporal * s.temporal * dt * dt / (sigma * sigma * sigma);
    }
    p
}
