//! Static and time-parameterized 3D Gaussian primitives.
//!
//! A dynamic Gaussian moves linearly, `x(t) = x0 + (t - t_mu) v`, and its
//! opacity is modulated by `exp(-0.5 ((t - t_mu) / t_sigma)^2)`. Colors are a
//! single RGB triple per Gaussian (no view dependence).

use nalgebra::{Matrix3, Quaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::depthfuse::PointCloud;
use crate::flowfuse::VoxelFlowField;
use crate::raster::{nearest_pixel, Image, Mask};

pub const DEFAULT_FLAME_COLOR: [f64; 3] = [1.0, 0.6, 0.1];
pub const DEFAULT_INIT_OPACITY: f64 = 0.1;

/// Number of optimizable scalars per static Gaussian.
pub const STATIC_PARAMS: usize = 14;
/// Number of optimizable scalars per dynamic Gaussian.
pub const DYNAMIC_PARAMS: usize = 19;

// Offsets into the packed parameter vectors.
pub const P_POS: usize = 0;
pub const P_LOG_SCALE: usize = 3;
pub const P_QUAT: usize = 6;
pub const P_COLOR: usize = 10;
pub const P_OPACITY: usize = 13;
pub const P_T_MU: usize = 14;
pub const P_T_SIGMA: usize = 15;
pub const P_VEL: usize = 16;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of `q / |q|`; `q` is `(w, x, y, z)` in nalgebra's layout.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticGaussian {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub color: [f64; 3],
    pub opacity_logit: f64,
}

impl StaticGaussian {
    /// Isotropic Gaussian with identity rotation.
    pub fn isotropic(position: Vector3<f64>, scale: f64, color: [f64; 3], opacity: f64) -> Self {
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Quaternion::identity(),
            color,
            opacity_logit: logit(opacity),
        }
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    #[inline]
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// World-space covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = quat_to_matrix(&self.rotation) * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn to_params(&self) -> [f64; STATIC_PARAMS] {
        let q = &self.rotation;
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.log_scale.x,
            self.log_scale.y,
            self.log_scale.z,
            q.w,
            q.i,
            q.j,
            q.k,
            self.color[0],
            self.color[1],
            self.color[2],
            self.opacity_logit,
        ]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            position: Vector3::new(p[0], p[1], p[2]),
            log_scale: Vector3::new(p[3], p[4], p[5]),
            rotation: Quaternion::new(p[6], p[7], p[8], p[9]),
            color: [p[10], p[11], p[12]],
            opacity_logit: p[13],
        }
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 && n.is_finite() {
            self.rotation /= n;
        } else {
            self.rotation = Quaternion::identity();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicGaussian {
    /// Appearance and the position `x0` at `t_mu`.
    pub base: StaticGaussian,
    pub t_mu: f64,
    pub t_sigma: f64,
    /// Meters per second.
    pub velocity: Vector3<f64>,
}

impl DynamicGaussian {
    pub fn position_at(&self, t: f64) -> Vector3<f64> {
        position_at(self, t)
    }

    pub fn temporal_opacity(&self, t: f64) -> f64 {
        temporal_opacity(self, t)
    }

    pub fn to_params(&self) -> [f64; DYNAMIC_PARAMS] {
        let mut p = [0.0; DYNAMIC_PARAMS];
        p[..STATIC_PARAMS].copy_from_slice(&self.base.to_params());
        p[P_T_MU] = self.t_mu;
        p[P_T_SIGMA] = self.t_sigma;
        p[P_VEL] = self.velocity.x;
        p[P_VEL + 1] = self.velocity.y;
        p[P_VEL + 2] = self.velocity.z;
        p
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            base: StaticGaussian::from_params(&p[..STATIC_PARAMS]),
            t_mu: p[P_T_MU],
            t_sigma: p[P_T_SIGMA],
            velocity: Vector3::new(p[P_VEL], p[P_VEL + 1], p[P_VEL + 2]),
        }
    }
}

pub fn position_at(g: &DynamicGaussian, t: f64) -> Vector3<f64> {
    g.base.position + g.velocity * (t - g.t_mu)
}

pub fn temporal_opacity(g: &DynamicGaussian, t: f64) -> f64 {
    let r = (t - g.t_mu) / g.t_sigma;
    (-0.5 * r * r).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub statics: Vec<StaticGaussian>,
    pub dynamics: Vec<DynamicGaussian>,
    pub background: [f64; 3],
}

impl Default for GaussianScene {
    fn default() -> Self {
        Self {
            statics: Vec::new(),
            dynamics: Vec::new(),
            background: [0.0; 3],
        }
    }
}

impl GaussianScene {
    pub fn new(statics: Vec<StaticGaussian>, dynamics: Vec<DynamicGaussian>, background: [f64; 3]) -> Self {
        Self {
            statics,
            dynamics,
            background,
        }
    }

    pub fn len(&self) -> usize {
        self.statics.len() + self.dynamics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the documented invariants; returns a description of the first
    /// violation.
    pub fn validate(&self) -> Result<(), String> {
        let check_base = |g: &StaticGaussian, what: &str, i: usize| -> Result<(), String> {
            let finite = g.position.iter().all(|v| v.is_finite())
                && g.log_scale.iter().all(|v| v.is_finite() && v.exp() > 0.0 && v.exp().is_finite())
                && g.color.iter().all(|v| v.is_finite())
                && g.opacity_logit.is_finite();
            if !finite {
                return Err(format!("{what} gaussian {i} has non-finite parameters"));
            }
            if (g.rotation.norm() - 1.0).abs() > 1e-6 {
                return Err(format!("{what} gaussian {i} rotation is not unit-norm"));
            }
            Ok(())
        };
        for (i, g) in self.statics.iter().enumerate() {
            check_base(g, "static", i)?;
        }
        for (i, g) in self.dynamics.iter().enumerate() {
            check_base(&g.base, "dynamic", i)?;
            if !(g.t_sigma > 0.0 && g.t_mu.is_finite()) {
                return Err(format!("dynamic gaussian {i} has invalid lifespan"));
            }
            if !g.velocity.iter().all(|v| v.is_finite()) {
                return Err(format!("dynamic gaussian {i} has non-finite velocity"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppearanceDefaults {
    pub color: [f64; 3],
    pub opacity: f64,
    /// Isotropic initial scale; `None` uses half the voxel size.
    pub scale: Option<f64>,
}

impl Default for AppearanceDefaults {
    fn default() -> Self {
        Self {
            color: DEFAULT_FLAME_COLOR,
            opacity: DEFAULT_INIT_OPACITY,
            scale: None,
        }
    }
}

/// One dynamic Gaussian per occupied voxel, in voxel index order.
///
/// `voxel_colors`, when given, is indexed by voxel and overrides the default
/// color where it holds a value.
pub fn init_from_flow(
    field: &VoxelFlowField,
    frame_time: f64,
    t: f64,
    rng_seed: u64,
    appearance: &AppearanceDefaults,
    voxel_colors: Option<&[Option<[f64; 3]>]>,
) -> Vec<DynamicGaussian> {
    assert!(frame_time > 0.0, "frame_time must be positive");
    let s = field.grid.voxel_size;
    let half = 0.5 * s;
    let scale = appearance.scale.unwrap_or(half);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    field
        .occupied_indices()
        .map(|i| {
            let jitter = Vector3::new(
                rng.gen_range(-half..=half),
                rng.gen_range(-half..=half),
                rng.gen_range(-half..=half),
            );
            let color = voxel_colors
                .and_then(|c| c[i])
                .unwrap_or(appearance.color);
            DynamicGaussian {
                base: StaticGaussian::isotropic(
                    field.grid.center(i) + jitter,
                    scale,
                    color,
                    appearance.opacity,
                ),
                t_mu: t,
                t_sigma: 4.0 * frame_time,
                velocity: field.flow[i] / frame_time,
            }
        })
        .collect()
}

/// Mean color of the masked pixels each occupied voxel center projects to.
pub fn voxel_colors(
    field: &VoxelFlowField,
    cameras: &[Camera],
    images: &[Image],
    masks: &[Mask],
) -> Vec<Option<[f64; 3]>> {
    (0..field.grid.len())
        .map(|i| {
            if !field.occupied[i] {
                return None;
            }
            let x = field.grid.center(i);
            let mut acc = [0.0; 3];
            let mut n = 0usize;
            for ((cam, img), mask) in cameras.iter().zip(images).zip(masks) {
                let Ok(p) = cam.project(&x) else { continue };
                let Some((px, py)) = nearest_pixel(p.pixel.x, p.pixel.y, cam.width(), cam.height())
                else {
                    continue;
                };
                if *mask.get(px, py) {
                    let c = img.get(px, py);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                    n += 1;
                }
            }
            (n > 0).then(|| acc.map(|a| (a / n as f64).clamp(0.0, 1.0)))
        })
        .collect()
}

/// Static Gaussians seeded from a fused point cloud. The isotropic scale of
/// each point is the mean distance to its `k` nearest neighbors (brute force).
pub fn statics_from_pointcloud(cloud: &PointCloud, k: usize, opacity: f64) -> Vec<StaticGaussian> {
    use rayon::prelude::*;
    let pts = &cloud.points;
    let k = k.max(1);
    pts.par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for (j, q) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p.position - q.position).norm_squared();
                if best.len() < k || d < best[best.len() - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.truncate(k);
                }
            }
            let mean = if best.is_empty() {
                0.01
            } else {
                best.iter().map(|d| d.sqrt()).sum::<f64>() / best.len() as f64
            };
            StaticGaussian::isotropic(p.position, mean.max(1e-4), p.color, opacity)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfuse::VoxelGridSpec;
    use proptest::prelude::*;

    fn dyn_at(x0: Vector3<f64>, v: Vector3<f64>, t_mu: f64, t_sigma: f64) -> DynamicGaussian {
        DynamicGaussian {
            base: StaticGaussian::isotropic(x0, 0.1, [1.0; 3], 0.5),
            t_mu,
            t_sigma,
            velocity: v,
        }
    }

    #[test]
    fn position_examples() {
        let g = dyn_at(Vector3::zeros(), Vector3::y(), 1.0, 0.1);
        assert_eq!(position_at(&g, 1.0), Vector3::zeros());
        assert_eq!(position_at(&g, 1.5), Vector3::new(0.0, 0.5, 0.0));
    }

    #[test]
    fn temporal_examples() {
        let g = dyn_at(Vector3::zeros(), Vector3::zeros(), 0.2, 0.01);
        assert_eq!(temporal_opacity(&g, 0.2), 1.0);
        assert!((temporal_opacity(&g, 0.21) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((temporal_opacity(&g, 0.23) - 0.011109).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn position_composes_linearly(
            x in prop::array::uniform3(-5.0f64..5.0),
            v in prop::array::uniform3(-5.0f64..5.0),
            t_mu in -1.0f64..1.0, a in -1.0f64..1.0, b in -1.0f64..1.0,
        ) {
            let g = dyn_at(Vector3::from(x), Vector3::from(v), t_mu, 0.1);
            let lhs = position_at(&g, t_mu + a + b);
            let rhs = position_at(&g, t_mu + a) + g.velocity * b;
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn temporal_is_symmetric(t_mu in -1.0f64..1.0, d in 0.0f64..1.0, s in 1e-3f64..1.0) {
            let g = dyn_at(Vector3::zeros(), Vector3::zeros(), t_mu, s);
            // symmetric in the offset itself
            let r = d / s;
            let expected = (-0.5 * r * r).exp();
            let up = DynamicGaussian { t_mu: 0.0, ..g };
            prop_assert_eq!(temporal_opacity(&up, d), temporal_opacity(&up, -d));
            prop_assert!((temporal_opacity(&g, t_mu + d) - expected).abs() < 1e-12);
            prop_assert!((temporal_opacity(&g, t_mu - d) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip() {
        let mut g = dyn_at(Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.0, 0.5, 0.25), 0.3, 0.02);
        g.base.rotation = Quaternion::new(0.5, 0.5, -0.5, 0.5);
        g.base.log_scale = Vector3::new(-1.0, -2.0, -3.0);
        assert_eq!(DynamicGaussian::from_params(&g.to_params()), g);
        assert_eq!(StaticGaussian::from_params(&g.base.to_params()), g.base);
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let q = Quaternion::new(0.3, -0.2, 0.9, 0.1);
        let r = quat_to_matrix(&q);
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        let uq = nalgebra::UnitQuaternion::from_quaternion(q);
        assert!((uq.to_rotation_matrix().into_inner() - r).norm() < 1e-12);
    }

    #[test]
    fn sigmoid_logit_inverse() {
        for p in [1e-6, 0.1, 0.5, 0.9, 0.999] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    fn field_with(n: usize, s: f64) -> VoxelFlowField {
        let grid = VoxelGridSpec::new(Vector3::new(-1.0, -1.0, -1.0), s, [n, n, n]).unwrap();
        let mut f = VoxelFlowField::empty(grid);
        for i in 0..grid.len() {
            f.occupied[i] = true;
            f.flow[i] = Vector3::new(0.0, 0.01, 0.0);
        }
        f
    }

    #[test]
    fn init_examples() {
        let empty = VoxelFlowField::empty(VoxelGridSpec::new(Vector3::zeros(), 0.1, [2, 2, 2]).unwrap());
        assert!(init_from_flow(&empty, 0.0025, 0.0, 1, &AppearanceDefaults::default(), None).is_empty());

        let one = field_with(1, 0.1);
        let g = init_from_flow(&one, 0.0025, 0.5, 1, &AppearanceDefaults::default(), None);
        assert_eq!(g.len(), 1);
        assert!((g[0].t_sigma - 0.01).abs() < 1e-15);
        assert_eq!(g[0].t_mu, 0.5);
        assert!((g[0].velocity - Vector3::new(0.0, 4.0, 0.0)).norm() < 1e-12);
        assert!((g[0].base.scale() - Vector3::repeat(0.05)).norm() < 1e-15);
        assert!((g[0].base.opacity() - 0.1).abs() < 1e-12);
        assert_eq!(g[0].base.color, DEFAULT_FLAME_COLOR);
    }

    #[test]
    fn init_jitter_statistics() {
        let s = 0.2;
        let field = field_with(10, s);
        let gs = init_from_flow(&field, 0.0025, 0.0, 42, &AppearanceDefaults::default(), None);
        assert_eq!(gs.len(), 1000);
        let mut mean = Vector3::zeros();
        for (i, g) in field.occupied_indices().zip(&gs) {
            let d = g.base.position - field.grid.center(i);
            assert!(d.iter().all(|c| c.abs() <= s / 2.0 + 1e-12));
            assert!(field.grid.voxel_contains(i, &g.base.position));
            mean += d;
        }
        mean /= gs.len() as f64;
        assert!(mean.iter().all(|m| m.abs() < 0.05 * s), "{mean:?}");
        let again = init_from_flow(&field, 0.0025, 0.0, 42, &AppearanceDefaults::default(), None);
        assert_eq!(gs, again);
        let other = init_from_flow(&field, 0.0025, 0.0, 43, &AppearanceDefaults::default(), None);
        assert_ne!(gs, other);
    }

    #[test]
    fn voxel_colors_override_default() {
        let field = field_with(1, 0.1);
        let g = init_from_flow(
            &field,
            0.0025,
            0.0,
            0,
            &AppearanceDefaults::default(),
            Some(&[Some([0.2, 0.3, 0.4])]),
        );
        assert_eq!(g[0].base.color, [0.2, 0.3, 0.4]);
    }

    #[test]
    fn pointcloud_scales_use_neighbor_distance() {
        use crate::depthfuse::{CloudPoint, DepthSource, PointOrigin};
        let points: Vec<CloudPoint> = (0..4)
            .map(|i| CloudPoint {
                position: Vector3::new(0.1 * i as f64, 0.0, 1.0),
                color: [0.5; 3],
            })
            .collect();
        let origins = vec![
            PointOrigin {
                camera: 0,
                pixel: (0, 0),
                source: DepthSource::Stereo
            };
            4
        ];
        let cloud = PointCloud { points, origins };
        let g = statics_from_pointcloud(&cloud, 1, 0.1);
        for s in &g {
            assert!((s.scale().x - 0.1).abs() < 1e-12);
        }
    }
}
