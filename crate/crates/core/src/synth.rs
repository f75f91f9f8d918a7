//! Synthetic ground truth: a textured wall and floor of static Gaussians, a
//! cluster of dynamic "flame" Gaussians, and a ring of cameras. Every output
//! (frames, depths, flows, masks) is computed from the Gaussians themselves.

use std::f64::consts::{PI, TAU};

use nalgebra::{Quaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, Intrinsics, Pose, ReadoutSchedule};
use crate::gaussians::{logit, DynamicGaussian, GaussianScene, StaticGaussian};
use crate::raster::{DepthMap, FlowMap, Image, Mask, Raster};
use crate::splatrender::{
    effective_times, render_at_times, RenderRequest, RenderSettings, ShutterMode,
};
use crate::sync::{paint_leds, LedClock, LedLayout};

/// Visible dynamic weight above which a pixel counts as flame.
pub const MASK_THRESHOLD: f64 = 0.2;
pub const CAMERA_RADIUS: f64 = 3.0;
pub const MAX_AZIMUTH_DEG: f64 = 25.0;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid synth spec: {0}")]
pub struct SynthError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MotionModel {
    /// Every dynamic Gaussian moves by `velocity` meters per frame and never
    /// fades.
    RigidTranslation { velocity: [f64; 3] },
    /// Short-lived Gaussians rising `rise` m/frame, with a sinusoidal
    /// sideways jitter of amplitude `jitter` m/frame.
    BuoyantPlume { rise: f64, jitter: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShutterSpec {
    Global,
    Rolling { line_time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub camera_count: usize,
    pub frame_count: usize,
    pub frame_rate: f64,
    pub width: usize,
    pub height: usize,
    pub motion_model: MotionModel,
    pub shutter: ShutterSpec,
    pub led_overlay: Option<LedLayout>,
    /// Standard deviation of the noise on synthetic monocular depth.
    pub mono_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_static: 400,
            n_dynamic: 60,
            camera_count: 3,
            frame_count: 20,
            frame_rate: 400.0,
            width: 64,
            height: 64,
            motion_model: MotionModel::BuoyantPlume {
                rise: 0.03,
                jitter: 0.01,
            },
            shutter: ShutterSpec::Global,
            led_overlay: None,
            mono_noise: 0.002,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError(m.into()));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad("frame_rate must be positive");
        }
        if self.camera_count == 0 || self.frame_count == 0 {
            return bad("camera_count and frame_count must be at least 1");
        }
        if self.width < 16 || self.height < 16 {
            return bad("images must be at least 16x16");
        }
        if !(self.mono_noise >= 0.0) {
            return bad("mono_noise must be non-negative");
        }
        if let ShutterSpec::Rolling { line_time } = self.shutter {
            if !(line_time >= 0.0 && line_time.is_finite()) {
                return bad("line_time must be non-negative");
            }
        }
        if let MotionModel::BuoyantPlume { rise, jitter } = self.motion_model {
            if !(rise.is_finite() && jitter.is_finite()) {
                return bad("plume parameters must be finite");
            }
        }
        if let Some(layout) = &self.led_overlay {
            layout
                .validate(self.width, self.height)
                .map_err(|e| SynthError(e.to_string()))?;
        }
        Ok(())
    }

    pub fn frame_time(&self) -> f64 {
        1.0 / self.frame_rate
    }

    fn readout(&self) -> ReadoutSchedule {
        match self.shutter {
            ShutterSpec::Global => ReadoutSchedule::global(),
            ShutterSpec::Rolling { line_time } => ReadoutSchedule::rolling(line_time),
        }
    }

    fn shutter_mode(&self) -> ShutterMode {
        if self.readout().is_global() {
            ShutterMode::Global
        } else {
            ShutterMode::Rolling
        }
    }
}

/// Ground truth for the LED overlay.
#[derive(Debug, Clone, PartialEq)]
pub struct LedTruth {
    pub layout: LedLayout,
    pub clock: LedClock,
    /// Counter value shown at time zero.
    pub base_counter: u32,
    /// Displayed counter per camera and frame.
    pub indices: Vec<Vec<u32>>,
    /// Frame-start offset of each camera within the strip cycle.
    pub offsets: Vec<f64>,
}

/// Per-camera monocular depth distortion `mono = scale * depth + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonoDistortion {
    pub scale: f64,
    pub offset: f64,
}

/// Everything [`generate`] produces; outer vectors are indexed by camera,
/// inner ones by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub spec: SynthSpec,
    pub scene: GaussianScene,
    pub cameras: Vec<Camera>,
    /// Frame-start time in seconds.
    pub frame_times: Vec<Vec<f64>>,
    pub frames: Vec<Vec<Image>>,
    pub depths: Vec<Vec<DepthMap>>,
    /// Alpha-weighted depth of the visible dynamic content only.
    pub flame_depths: Vec<Vec<DepthMap>>,
    pub masks: Vec<Vec<Mask>>,
    /// Flow from frame `f` to `f + 1`; one fewer than frames.
    pub flows: Vec<Vec<FlowMap>>,
    /// Fire-free renders.
    pub backgrounds: Vec<Image>,
    /// Sparse metric depth of the static scene.
    pub stereo: Vec<DepthMap>,
    /// Affine-distorted noisy depth of the static scene.
    pub mono: Vec<DepthMap>,
    /// Affine-distorted noisy depth of every frame.
    pub mono_frames: Vec<Vec<DepthMap>>,
    pub mono_distortion: Vec<MonoDistortion>,
    pub led: Option<LedTruth>,
    /// Pixels covered by the LED board.
    pub sync_mask: Option<Mask>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Cameras on a circle of radius 3 around the origin at flame height, spread
/// evenly over azimuths within ±25 degrees and looking at the origin.
pub fn build_cameras(spec: &SynthSpec) -> Vec<Camera> {
    let (w, h) = (spec.width, spec.height);
    let f = 1.1 * w as f64;
    let k = Intrinsics::new(f, f, (w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0, w, h)
        .expect("validated size");
    let n = spec.camera_count;
    (0..n)
        .map(|i| {
            let az = if n == 1 {
                0.0
            } else {
                (-MAX_AZIMUTH_DEG + 2.0 * MAX_AZIMUTH_DEG * i as f64 / (n - 1) as f64).to_radians()
            };
            let eye = Vector3::new(CAMERA_RADIUS * az.sin(), 0.0, CAMERA_RADIUS * az.cos());
            let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::y()).expect("not degenerate");
            Camera::new(k, pose, spec.readout())
        })
        .collect()
}

fn texture(p: &Vector3<f64>, phases: &[f64; 6], rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|c| {
        let s = (2.1 * p.x + phases[c]).sin() * (1.7 * (p.y + p.z) + phases[c + 3]).cos();
        (0.05 + 0.25 * (0.5 + 0.5 * s) + 0.03 * (rng.gen::<f64>() - 0.5)).clamp(0.02, 0.3)
    })
}

fn flat_gaussian(position: Vector3<f64>, scale: Vector3<f64>, color: [f64; 3]) -> StaticGaussian {
    StaticGaussian {
        position,
        log_scale: scale.map(f64::ln),
        rotation: Quaternion::identity(),
        color,
        opacity_logit: logit(0.98),
    }
}

/// Wall at `z = -1.5` (three quarters of the statics) and floor at `y = -1`.
fn build_statics(n: usize, rng: &mut ChaCha8Rng) -> Vec<StaticGaussian> {
    let phases: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..TAU));
    let n_wall = (n * 3).div_ceil(4);
    let n_floor = n - n_wall;
    let mut out = Vec::with_capacity(n);
    let grid = |count: usize, aspect: f64| {
        let cols = ((count as f64 * aspect).sqrt().ceil() as usize).max(1);
        let rows = count.div_ceil(cols).max(1);
        (cols, rows)
    };
    let (wx, wy) = ((-4.2, 4.2), (-1.0, 3.4));
    let (cols, rows) = grid(n_wall, (wx.1 - wx.0) / (wy.1 - wy.0));
    let sx = (wx.1 - wx.0) / cols as f64;
    let sy = (wy.1 - wy.0) / rows as f64;
    for i in 0..n_wall {
        let (c, r) = (i % cols, i / cols);
        let p = Vector3::new(wx.0 + (c as f64 + 0.5) * sx, wy.0 + (r as f64 + 0.5) * sy, -1.5);
        let color = texture(&p, &phases, rng);
        out.push(flat_gaussian(p, Vector3::new(0.6 * sx, 0.6 * sy, 0.02), color));
    }
    let (fx, fz) = ((-3.5, 3.5), (-1.5, 1.2));
    if n_floor > 0 {
        let (cols, rows) = grid(n_floor, (fx.1 - fx.0) / (fz.1 - fz.0));
        let sx = (fx.1 - fx.0) / cols as f64;
        let sz = (fz.1 - fz.0) / rows as f64;
        for i in 0..n_floor {
            let (c, r) = (i % cols, i / cols);
            let p = Vector3::new(fx.0 + (c as f64 + 0.5) * sx, -1.0, fz.0 + (r as f64 + 0.5) * sz);
            let color = texture(&p, &phases, rng);
            out.push(flat_gaussian(p, Vector3::new(0.6 * sx, 0.02, 0.6 * sz), color));
        }
    }
    out
}

fn flame_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // brighter than the backdrop in every channel
    let t: f64 = rng.gen();
    [1.0, 0.55 + 0.35 * t, 0.35 + 0.25 * t]
}

fn flame_gaussian(position: Vector3<f64>, rng: &mut ChaCha8Rng) -> StaticGaussian {
    let s = rng.gen_range(0.05..0.08);
    StaticGaussian {
        position,
        log_scale: Vector3::new(s, 1.5 * s, s).map(f64::ln),
        rotation: Quaternion::identity(),
        color: flame_color(rng),
        opacity_logit: logit(0.75),
    }
}

fn build_dynamics(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<DynamicGaussian> {
    let fr = spec.frame_rate;
    let dt = spec.frame_time();
    let duration = spec.frame_count as f64 * dt;
    match spec.motion_model {
        MotionModel::RigidTranslation { velocity } => {
            let v = Vector3::from(velocity) * fr;
            (0..spec.n_dynamic)
                .map(|_| {
                    let p = Vector3::new(
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.6..-0.3),
                        rng.gen_range(-0.2..0.2),
                    );
                    DynamicGaussian {
                        base: flame_gaussian(p, rng),
                        t_mu: 0.0,
                        // effectively never fades
                        t_sigma: 1e3 * duration.max(1.0),
                        velocity: v,
                    }
                })
                .collect()
        }
        MotionModel::BuoyantPlume { rise, jitter } => {
            let life = 10.0 * dt;
            let ph: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..TAU));
            (0..spec.n_dynamic)
                .map(|_| {
                    let birth = Vector3::new(
                        rng.gen_range(-0.2..0.2),
                        rng.gen_range(-0.6..-0.45),
                        rng.gen_range(-0.2..0.2),
                    );
                    let t_birth = rng.gen_range(-life..duration);
                    let v = Vector3::new(
                        jitter * (2.0 * PI * birth.z / 0.4 + ph[0]).sin(),
                        rise * (1.0 + 0.25 * (2.0 * PI * birth.x / 0.3 + ph[1]).sin()),
                        jitter * (2.0 * PI * birth.x / 0.4 + ph[2]).cos(),
                    ) * fr;
                    let t_mu = t_birth + 0.5 * life;
                    DynamicGaussian {
                        base: flame_gaussian(birth + v * (t_mu - t_birth), rng),
                        t_mu,
                        t_sigma: 0.25 * life,
                        velocity: v,
                    }
                })
                .collect()
        }
    }
}

pub fn build_scene(spec: &SynthSpec) -> GaussianScene {
    let mut rng = rng_for(spec.seed, 1);
    let statics = build_statics(spec.n_static, &mut rng);
    let dynamics = build_dynamics(spec, &mut rng);
    GaussianScene::new(statics, dynamics, [0.0; 3])
}

struct FrameOut {
    color: Image,
    depth: DepthMap,
    flame_depth: DepthMap,
    mask: Mask,
    /// Alpha-weighted mean 3D displacement to the next frame, per pixel.
    motion: Option<Raster<[f64; 3]>>,
}

fn render_frame(
    scene: &GaussianScene,
    camera: &Camera,
    shutter: ShutterMode,
    t: f64,
    t_next: Option<f64>,
) -> FrameOut {
    let settings = RenderSettings::default();
    let req = RenderRequest {
        camera: *camera,
        time: t,
        shutter,
    };
    let times = effective_times(scene, &req, &settings);
    let out = render_at_times(scene, camera, &settings, &times);

    // weights of the dynamic content: channel 0 = sum w z, channel 1 = sum w
    let mut probe = scene.clone();
    probe.background = [0.0; 3];
    for s in &mut probe.statics {
        s.color = [0.0; 3];
    }
    for (g, t) in probe.dynamics.iter_mut().zip(&times) {
        let z = t.map_or(0.0, |t| camera.world_to_camera(&g.position_at(t)).z);
        g.base.color = [z, 1.0, 0.0];
    }
    let zw = render_at_times(&probe, camera, &settings, &times).color;
    let (w, h) = (camera.width(), camera.height());
    let mask = zw.map(|p| p[1] >= MASK_THRESHOLD);
    let fd = zw.map(|p| if p[1] >= MASK_THRESHOLD { p[0] / p[1] } else { 0.0 });
    let flame_depth = DepthMap::with_mask(fd, mask.clone()).expect("same shape");

    let motion = t_next.map(|tn| {
        let next = effective_times(
            scene,
            &RenderRequest {
                time: tn,
                ..req
            },
            &settings,
        );
        for ((g, t), tn) in probe.dynamics.iter_mut().zip(&times).zip(&next) {
            let d = match (t, tn) {
                (Some(a), Some(b)) => g.position_at(*b) - g.position_at(*a),
                _ => Vector3::zeros(),
            };
            g.base.color = [d.x, d.y, d.z];
        }
        let sum = render_at_times(&probe, camera, &settings, &times).color;
        Raster::from_fn(w, h, |x, y| {
            let wsum = zw.get(x, y)[1];
            let s = sum.get(x, y);
            if wsum >= MASK_THRESHOLD {
                [s[0] / wsum, s[1] / wsum, s[2] / wsum]
            } else {
                [0.0; 3]
            }
        })
    });
    FrameOut {
        color: out.color,
        depth: out.depth,
        flame_depth,
        mask,
        motion,
    }
}

/// Screen-space flow of the flame surface: the point at the flame depth
/// under pixel `p`, moved by the mean displacement there, reprojected.
fn flow_from_motion(camera: &Camera, flame_depth: &DepthMap, motion: &Raster<[f64; 3]>) -> FlowMap {
    let (w, h) = flame_depth.shape();
    let mut flow = Raster::filled(w, h, [0.0; 2]);
    let mut valid = Raster::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let Some(d) = flame_depth.at(x, y) else { continue };
            let p = Vector2::new(x as f64, y as f64);
            let Ok(xw) = camera.backproject(&p, d) else { continue };
            let m = motion.get(x, y);
            let Ok(q) = camera.project(&(xw + Vector3::new(m[0], m[1], m[2]))) else {
                continue;
            };
            flow.set(x, y, [q.pixel.x - p.x, q.pixel.y - p.y]);
            valid.set(x, y, true);
        }
    }
    FlowMap::new(flow, valid).expect("same shape")
}

fn distort(depth: &DepthMap, d: &MonoDistortion, noise: f64, rng: &mut ChaCha8Rng) -> DepthMap {
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite");
    let values = Raster::from_fn(depth.width(), depth.height(), |x, y| match depth.at(x, y) {
        Some(z) => {
            let e = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            d.scale * z + d.offset + e
        }
        None => 0.0,
    });
    let valid = Raster::from_fn(depth.width(), depth.height(), |x, y| {
        depth.at(x, y).is_some() && *values.get(x, y) > 0.0
    });
    DepthMap::with_mask(values, valid).expect("same shape")
}

/// Deterministic in `spec.seed`; frames are rendered in parallel.
pub fn generate(spec: &SynthSpec) -> Result<SynthBundle, SynthError> {
    spec.validate()?;
    let scene = build_scene(spec);
    let cameras = build_cameras(spec);
    let shutter = spec.shutter_mode();
    let nc = spec.camera_count;
    let nf = spec.frame_count;
    let dt = spec.frame_time();

    let mut led_rng = rng_for(spec.seed, 2);
    let offsets: Vec<f64> = match spec.led_overlay {
        Some(_) => (0..nc).map(|_| led_rng.gen_range(0.0..0.4 * dt)).collect(),
        None => vec![0.0; nc],
    };
    let frame_times: Vec<Vec<f64>> = offsets
        .iter()
        .map(|o| (0..nf).map(|f| f as f64 * dt + o).collect())
        .collect();

    let jobs: Vec<(usize, usize)> = (0..nc).flat_map(|c| (0..nf).map(move |f| (c, f))).collect();
    let rendered: Vec<FrameOut> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let t_next = (f + 1 < nf).then(|| frame_times[c][f + 1]);
            render_frame(&scene, &cameras[c], shutter, frame_times[c][f], t_next)
        })
        .collect();

    let statics_only = GaussianScene::new(scene.statics.clone(), Vec::new(), scene.background);
    let background_renders: Vec<_> = cameras
        .par_iter()
        .map(|cam| render_at_times(&statics_only, cam, &RenderSettings::default(), &[]))
        .collect();

    let mut frames = vec![Vec::with_capacity(nf); nc];
    let mut depths = vec![Vec::with_capacity(nf); nc];
    let mut flame_depths = vec![Vec::with_capacity(nf); nc];
    let mut masks = vec![Vec::with_capacity(nf); nc];
    let mut flows = vec![Vec::with_capacity(nf.saturating_sub(1)); nc];
    for (&(c, _), out) in jobs.iter().zip(rendered) {
        if let Some(m) = &out.motion {
            flows[c].push(flow_from_motion(&cameras[c], &out.flame_depth, m));
        }
        frames[c].push(out.color);
        depths[c].push(out.depth);
        flame_depths[c].push(out.flame_depth);
        masks[c].push(out.mask);
    }

    let mut depth_rng = rng_for(spec.seed, 3);
    let mono_distortion: Vec<MonoDistortion> = (0..nc)
        .map(|_| MonoDistortion {
            scale: depth_rng.gen_range(0.3..0.7),
            offset: depth_rng.gen_range(0.1..0.6),
        })
        .collect();
    let mut stereo = Vec::with_capacity(nc);
    let mut mono = Vec::with_capacity(nc);
    for (c, r) in background_renders.iter().enumerate() {
        let keep = Raster::from_fn(r.depth.width(), r.depth.height(), |x, y| {
            r.depth.at(x, y).is_some() && depth_rng.gen::<f64>() < 0.3
        });
        stereo.push(DepthMap::with_mask(r.depth.values.clone(), keep).expect("same shape"));
        mono.push(distort(&r.depth, &mono_distortion[c], spec.mono_noise, &mut depth_rng));
    }
    let mono_frames: Vec<Vec<DepthMap>> = depths
        .iter()
        .enumerate()
        .map(|(c, ds)| {
            ds.iter()
                .map(|d| distort(d, &mono_distortion[c], spec.mono_noise, &mut depth_rng))
                .collect()
        })
        .collect();

    let mut led = None;
    let mut sync_mask = None;
    if let Some(layout) = &spec.led_overlay {
        let clock = LedClock {
            frame_period: dt,
            strip_toggle_period: layout.strip_toggle_period,
        };
        let base_counter = led_rng.gen_range(100..30000u32);
        let t0 = base_counter as f64 * dt;
        let mut indices = vec![Vec::with_capacity(nf); nc];
        for c in 0..nc {
            let readout = cameras[c].readout;
            for f in 0..nf {
                let t = t0 + frame_times[c][f];
                paint_leds(&mut frames[c][f], layout, &clock, &readout, t, [1.0; 3], [0.02; 3]);
                let y = layout.ambiguity_led_region.y as f64;
                indices[c].push(clock.counter(t + readout.row_delay(y, spec.height)));
            }
        }
        let mut m = Raster::filled(spec.width, spec.height, false);
        for r in layout
            .counter_led_regions
            .iter()
            .chain(std::iter::once(&layout.ambiguity_led_region))
            .chain(&layout.strip_regions)
        {
            for y in r.y..r.y + r.height {
                for x in r.x..r.x + r.width {
                    m.set(x, y, true);
                }
            }
        }
        sync_mask = Some(m);
        led = Some(LedTruth {
            layout: layout.clone(),
            clock,
            base_counter,
            indices,
            offsets: offsets.iter().map(|o| o.rem_euclid(layout.strip_cycle())).collect(),
        });
    }

    Ok(SynthBundle {
        spec: spec.clone(),
        scene,
        cameras,
        frame_times,
        frames,
        depths,
        flame_depths,
        masks,
        flows,
        backgrounds: background_renders.into_iter().map(|r| r.color).collect(),
        stereo,
        mono,
        mono_frames,
        mono_distortion,
        led,
        sync_mask,
    })
}
