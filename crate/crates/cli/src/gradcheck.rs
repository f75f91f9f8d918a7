//! Finite-difference check of the analytic gradients on two small scenes: a
//! single dynamic Gaussian and a 50-Gaussian static/dynamic mix seen through a
//! rolling shutter.

use std::collections::BTreeMap;

use flamesplat::camera::{Camera, Intrinsics, Pose, ReadoutSchedule};
use flamesplat::gaussians::{
    DynamicGaussian, GaussianScene, StaticGaussian, P_COLOR, P_LOG_SCALE, P_OPACITY, P_QUAT, P_T_MU,
    P_T_SIGMA, P_VEL,
};
use flamesplat::optimize::{gradient_check_with, LossWeights, ParamSelection, TrainBatch};
use flamesplat::raster::{DepthMap, Raster};
use flamesplat::splatrender::{render_with, RenderRequest, RenderSettings, ShutterMode};
use nalgebra::{Quaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{numeric, CliError};

#[derive(Debug, Clone, Serialize)]
pub struct SceneCheck {
    pub name: String,
    pub parameters: usize,
    pub max_rel_error: f64,
    /// Worst relative error per parameter kind.
    pub by_kind: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientCheckSummary {
    pub eps: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub scenes: Vec<SceneCheck>,
}

pub fn param_kind(param: usize) -> &'static str {
    match param {
        p if p < P_LOG_SCALE => "position",
        p if p < P_QUAT => "scale",
        p if p < P_COLOR => "rotation",
        p if p < P_OPACITY => "color",
        P_OPACITY => "opacity",
        P_T_MU => "t_mu",
        P_T_SIGMA => "t_sigma",
        p if p >= P_VEL => "velocity",
        _ => unreachable!("parameter index {param}"),
    }
}

fn camera(w: usize, h: usize, f: f64, line_time: f64) -> Camera {
    Camera::new(
        Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).expect("valid intrinsics"),
        Pose::identity(),
        ReadoutSchedule::rolling(line_time),
    )
}

pub fn probe_scene() -> (GaussianScene, Camera) {
    // near a corner, so translating it changes how much of it is in view;
    // a centered splat has almost no in-plane gradient
    let mut base = StaticGaussian::isotropic(Vector3::new(0.75, -0.6, 2.0), 0.15, [0.3, 0.7, 0.9], 0.7);
    base.log_scale = Vector3::new(-1.9, -2.2, -1.7);
    base.rotation = Quaternion::new(0.9, 0.2, -0.3, 0.1);
    base.normalize_rotation();
    let g = DynamicGaussian {
        base,
        t_mu: 0.01,
        t_sigma: 0.02,
        velocity: Vector3::new(1.0, -2.0, 0.5),
    };
    let scene = GaussianScene::new(vec![], vec![g], [0.1; 3]);
    (scene, camera(24, 20, 20.0, 0.0))
}

pub fn mixed_scene(seed: u64) -> (GaussianScene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // depths are stratified 2.8 cm apart so no perturbation can swap the
    // compositing order of two Gaussians
    let random_static = |rng: &mut ChaCha8Rng, slot: usize| {
        let z = 1.6 + 0.028 * (slot as f64 + rng.gen_range(0.3..0.7));
        let p = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.4..0.4), z);
        let color = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        let mut g = StaticGaussian::isotropic(p, 0.1, color, rng.gen_range(0.2..0.6));
        g.log_scale = Vector3::from_fn(|_, _| rng.gen_range(0.05f64..0.15).ln());
        g.rotation = Quaternion::new(
            rng.gen_range(0.5..1.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        );
        g.normalize_rotation();
        g
    };
    let mut slots: Vec<usize> = (0..50).collect();
    slots.shuffle(&mut rng);
    let statics: Vec<_> = slots[..30].iter().map(|&k| random_static(&mut rng, k)).collect();
    let dynamics: Vec<_> = slots[30..]
        .iter()
        .map(|&k| DynamicGaussian {
            base: random_static(&mut rng, k),
            // |t_mu| well away from the render time keeps the velocity
            // gradients, which scale with it, above the loss roundoff
            t_mu: rng.gen_range(0.004..0.012) * if rng.gen() { 1.0 } else { -1.0 },
            t_sigma: rng.gen_range(0.01..0.02),
            // small depth motion so the stratified order survives
            velocity: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.3..0.3)),
        })
        .collect();
    let scene = GaussianScene::new(statics, dynamics, [0.1; 3]);
    (scene, camera(32, 28, 28.0, 2e-5))
}

/// Targets chosen so the loss is smooth at the evaluation point: colors sit a
/// constant offset above the render and depth 5 cm in front of it, so no L1
/// term changes sign under a small perturbation. Small offsets also keep the
/// loss, and with it the roundoff in the finite differences, small.
fn batch_for(scene: &GaussianScene, cam: Camera, shutter: ShutterMode) -> TrainBatch {
    let req = RenderRequest {
        camera: cam,
        time: 0.0,
        shutter,
    };
    let out = render_with(scene, &req, &RenderSettings::exact());
    let target = out.color.map(|c| [c[0] + 0.2, c[1] + 0.15, c[2] + 0.25]);
    let mut b = TrainBatch::new(cam, target, 0.0);
    b.shutter = shutter;
    let (w, h) = (cam.width(), cam.height());
    let depth = Raster::from_fn(w, h, |x, y| out.depth.at(x, y).map_or(0.5, |d| d - 0.05));
    b.target_depth = Some(DepthMap::with_mask(depth, Raster::filled(w, h, true)).expect("same shape"));
    b
}

fn check(name: &str, scene: &GaussianScene, batch: &TrainBatch, eps: f64) -> Result<SceneCheck, CliError> {
    let r = gradient_check_with(scene, batch, &LossWeights::default(), &ParamSelection::All, eps).map_err(numeric)?;
    let mut by_kind = BTreeMap::new();
    for e in &r.entries {
        let k = by_kind.entry(param_kind(e.param.param).to_string()).or_insert(0.0f64);
        *k = k.max(e.rel_error);
    }
    Ok(SceneCheck {
        name: name.into(),
        parameters: r.entries.len(),
        max_rel_error: r.max_rel_error,
        by_kind,
    })
}

pub fn run(eps: f64, tolerance: f64, seed: u64) -> Result<GradientCheckSummary, CliError> {
    let (probe, pcam) = probe_scene();
    let (mixed, mcam) = mixed_scene(seed);
    let scenes = vec![
        check("probe", &probe, &batch_for(&probe, pcam, ShutterMode::Global), eps)?,
        check("mixed", &mixed, &batch_for(&mixed, mcam, ShutterMode::Rolling), eps)?,
    ];
    let max_rel_error = scenes.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    Ok(GradientCheckSummary {
        eps,
        tolerance,
        max_rel_error,
        passed: max_rel_error < tolerance,
        scenes,
    })
}
