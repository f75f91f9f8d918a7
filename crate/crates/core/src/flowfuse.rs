//! Multi-view fusion of 2D optical flow into a voxelized 3D flow field.
//!
//! Each camera contributes the displacement `u_i` obtained by advecting the
//! projection of a voxel center with the camera's flow and lifting the result
//! back to the voxel's camera-frame depth. The fused flow `F` solves
//!
//! ```text
//! min_F  sum_i (u_i . F - |u_i|^2)^2 + alpha^2 |F|^2,
//! alpha = (alpha0 / m) * sum_i |u_i|^2
//! ```
//!
//! through an SVD of the stacked system `[A; alpha I] F = [d; 0]`. With
//! `alpha0 = 0` and a consistent system this enforces `(F - u_i) . u_i = 0`
//! for every camera.
//!
//! `alpha` is computed literally from the data and carries units of squared
//! length, so the relative strength of the ridge term scales with `|u|^2`.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::Camera;
use crate::raster::{nearest_pixel, DepthMap, FlowMap, Mask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("point not observed: {0}")]
    NotObserved(&'static str),
    #[error("no observations to solve")]
    NoObservation,
    #[error("no cameras given")]
    EmptyCameraList,
    #[error("input mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),
}

/// Lifted flow displacement `u_i(x)` in meters per frame.
///
/// `x` is projected into `camera`, the flow is sampled bilinearly there, and the
/// advected pixel is back-projected to the camera-frame depth of `x`.
pub fn backproject_flow(
    camera: &Camera,
    flow: &FlowMap,
    x: &Vector3<f64>,
) -> Result<Vector3<f64>, FlowError> {
    if flow.shape() != (camera.width(), camera.height()) {
        return Err(FlowError::ShapeMismatch(format!(
            "flow {:?} vs camera {}x{}",
            flow.shape(),
            camera.width(),
            camera.height()
        )));
    }
    let proj = camera
        .project(x)
        .map_err(|_| FlowError::NotObserved("behind camera"))?;
    let p = proj.pixel;
    if !camera.in_bounds(&p) {
        return Err(FlowError::NotObserved("outside image"));
    }
    let f = flow
        .sample_bilinear(p.x, p.y)
        .ok_or(FlowError::NotObserved("invalid flow"))?;
    let advected = p + Vector2::new(f[0], f[1]);
    let moved = camera
        .backproject(&advected, proj.depth)
        .expect("projected depth is positive");
    Ok(moved - x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelSolution {
    pub flow: Vector3<f64>,
    /// Smallest over largest singular value of the observation matrix `A`
    /// (three singular values, zero-padded when fewer than three rows).
    pub confidence: f64,
}

/// Tikhonov-regularized least-squares 3D flow from lifted observations.
pub fn solve_voxel_flow(
    observations: &[Vector3<f64>],
    alpha0: f64,
) -> Result<VoxelSolution, FlowError> {
    let m = observations.len();
    if m == 0 {
        return Err(FlowError::NoObservation);
    }
    let sum_sq: f64 = observations.iter().map(|u| u.norm_squared()).sum();
    if sum_sq == 0.0 {
        // stationary voxel: the system collapses to 0 = 0
        return Ok(VoxelSolution {
            flow: Vector3::zeros(),
            confidence: 0.0,
        });
    }
    let alpha = alpha0 / m as f64 * sum_sq;

    let a = DMatrix::from_fn(m, 3, |r, c| observations[r][c]);
    let mut stacked = DMatrix::zeros(m + 3, 3);
    stacked.view_mut((0, 0), (m, 3)).copy_from(&a);
    for k in 0..3 {
        stacked[(m + k, k)] = alpha;
    }
    let mut rhs = DVector::zeros(m + 3);
    for (i, u) in observations.iter().enumerate() {
        rhs[i] = u.norm_squared();
    }

    let svd = stacked.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * (m + 3) as f64;
    let mut sol = svd.solve(&rhs, tol).expect("U and V^T were requested");
    // nalgebra's SVD is only converged to ~1e-9 relative; a couple of
    // refinement steps on the least-squares residual recover full precision
    for _ in 0..2 {
        let r = &rhs - &stacked * &sol;
        sol += svd.solve(&r, tol).expect("U and V^T were requested");
    }
    let flow = Vector3::new(sol[0], sol[1], sol[2]);

    let confidence = if m < 3 {
        0.0
    } else {
        let sv = a.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        if hi > 0.0 {
            lo / hi
        } else {
            0.0
        }
    };
    Ok(VoxelSolution { flow, confidence })
}

/// Regular voxel grid; voxel `(ix, iy, iz)` spans
/// `origin + s * [ix, ix+1) x [iy, iy+1) x [iz, iz+1)`.
/// Linear index is `(iz * ny + iy) * nx + ix`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Result<Self, FlowError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(FlowError::InvalidGrid(format!("voxel size {voxel_size}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(FlowError::InvalidGrid(format!("dims {dims:?}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(FlowError::InvalidGrid("non-finite origin".into()));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    #[inline]
    pub fn center(&self, index: usize) -> Vector3<f64> {
        let c = self.coords(index);
        self.origin
            + Vector3::new(
                c[0] as f64 + 0.5,
                c[1] as f64 + 0.5,
                c[2] as f64 + 0.5,
            ) * self.voxel_size
    }

    /// Closed-cube containment test for voxel `index`.
    pub fn voxel_contains(&self, index: usize, p: &Vector3<f64>) -> bool {
        let c = self.center(index);
        let h = 0.5 * self.voxel_size;
        (p - c).iter().all(|d| d.abs() <= h * (1.0 + 1e-12))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFlowField {
    pub grid: VoxelGridSpec,
    /// Meters per frame; zero for unoccupied voxels.
    pub flow: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
    pub occupied: Vec<bool>,
}

impl VoxelFlowField {
    pub fn empty(grid: VoxelGridSpec) -> Self {
        let n = grid.len();
        Self {
            grid,
            flow: vec![Vector3::zeros(); n],
            confidence: vec![0.0; n],
            occupied: vec![false; n],
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn occupied_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupied
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| o.then_some(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSettings {
    pub alpha0: f64,
    /// Allowed |z(x) - depth hint| in units of voxel size.
    pub depth_tolerance_voxels: f64,
    pub min_cameras: usize,
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            alpha0: 0.1,
            depth_tolerance_voxels: 1.5,
            min_cameras: 2,
        }
    }
}

/// Lifted observations of voxel center `x` from every camera that sees it inside
/// its dynamic mask, agrees with its depth hint and has valid flow there.
pub fn voxel_observations(
    cameras: &[Camera],
    flows: &[FlowMap],
    depth_hints: &[DepthMap],
    masks: &[Mask],
    x: &Vector3<f64>,
    depth_tolerance: f64,
) -> Vec<Vector3<f64>> {
    let mut obs = Vec::with_capacity(cameras.len());
    for (ci, cam) in cameras.iter().enumerate() {
        let Ok(proj) = cam.project(x) else { continue };
        let Some((px, py)) = nearest_pixel(proj.pixel.x, proj.pixel.y, cam.width(), cam.height())
        else {
            continue;
        };
        if !*masks[ci].get(px, py) {
            continue;
        }
        match depth_hints[ci].at(px, py) {
            Some(hint) if (hint - proj.depth).abs() <= depth_tolerance => {}
            _ => continue,
        }
        if let Ok(u) = backproject_flow(cam, &flows[ci], x) {
            obs.push(u);
        }
    }
    obs
}

pub fn fuse_flow_grid(
    cameras: &[Camera],
    flows: &[FlowMap],
    depth_hints: &[DepthMap],
    masks: &[Mask],
    grid: &VoxelGridSpec,
    alpha0: f64,
) -> Result<VoxelFlowField, FlowError> {
    fuse_flow_grid_with(
        cameras,
        flows,
        depth_hints,
        masks,
        grid,
        &FusionSettings {
            alpha0,
            ..FusionSettings::default()
        },
    )
}

/// A voxel is occupied when at least `min_cameras` cameras provide an
/// observation (see [`voxel_observations`]); occupied voxels store the solve.
pub fn fuse_flow_grid_with(
    cameras: &[Camera],
    flows: &[FlowMap],
    depth_hints: &[DepthMap],
    masks: &[Mask],
    grid: &VoxelGridSpec,
    settings: &FusionSettings,
) -> Result<VoxelFlowField, FlowError> {
    if cameras.is_empty() {
        return Err(FlowError::EmptyCameraList);
    }
    let n = cameras.len();
    if flows.len() != n || depth_hints.len() != n || masks.len() != n {
        return Err(FlowError::ShapeMismatch(format!(
            "{n} cameras, {} flows, {} depth hints, {} masks",
            flows.len(),
            depth_hints.len(),
            masks.len()
        )));
    }
    for (ci, cam) in cameras.iter().enumerate() {
        let shape = (cam.width(), cam.height());
        if flows[ci].shape() != shape
            || depth_hints[ci].shape() != shape
            || masks[ci].shape() != shape
        {
            return Err(FlowError::ShapeMismatch(format!(
                "camera {ci} inputs do not match {shape:?}"
            )));
        }
    }
    let tol = settings.depth_tolerance_voxels * grid.voxel_size;
    let min_cameras = settings.min_cameras.max(1);
    let solved: Vec<Option<VoxelSolution>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.center(i);
            let obs = voxel_observations(cameras, flows, depth_hints, masks, &x, tol);
            if obs.len() < min_cameras {
                return None;
            }
            solve_voxel_flow(&obs, settings.alpha0).ok()
        })
        .collect();

    let mut field = VoxelFlowField::empty(*grid);
    for (i, s) in solved.into_iter().enumerate() {
        if let Some(s) = s {
            field.occupied[i] = true;
            field.flow[i] = s.flow;
            field.confidence[i] = s.confidence;
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose, ReadoutSchedule};
    use crate::raster::Raster;
    use proptest::prelude::*;

    fn front_camera() -> Camera {
        // camera at origin looking down +z (toward the point at z = 2)
        Camera::new(
            Intrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap(),
            Pose::identity(),
            ReadoutSchedule::global(),
        )
    }

    #[test]
    fn zero_flow_gives_zero_displacement() {
        let cam = front_camera();
        let u = backproject_flow(&cam, &FlowMap::zeros(101, 101), &Vector3::new(0.1, -0.05, 2.0))
            .unwrap();
        assert!(u.norm() < 1e-15);
    }

    #[test]
    fn horizontal_flow_lifts_by_depth_over_focal() {
        let cam = front_camera();
        let flow = FlowMap::new(
            Raster::filled(101, 101, [10.0, 0.0]),
            Raster::filled(101, 101, true),
        )
        .unwrap();
        let u = backproject_flow(&cam, &flow, &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert!((u - Vector3::new(0.2, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn lifted_flow_stays_at_constant_depth() {
        let pose = Pose::look_at(
            Vector3::new(0.5, -0.3, -2.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let cam = Camera::new(
            Intrinsics::new(80.0, 90.0, 40.0, 30.0, 81, 61).unwrap(),
            pose,
            ReadoutSchedule::global(),
        );
        let flow = FlowMap::new(
            Raster::from_fn(81, 61, |x, y| [0.1 * x as f64 - 3.0, 2.0 - 0.05 * y as f64]),
            Raster::filled(81, 61, true),
        )
        .unwrap();
        for x in [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.2, 0.1, -0.1),
            Vector3::new(-0.3, 0.2, 0.3),
        ] {
            let u = backproject_flow(&cam, &flow, &x).unwrap();
            let uc = cam.pose.rotation() * u;
            assert!(uc.z.abs() < 1e-12, "{uc:?}");
        }
    }

    #[test]
    fn unobserved_cases() {
        let cam = front_camera();
        let zeros = FlowMap::zeros(101, 101);
        assert!(backproject_flow(&cam, &zeros, &Vector3::new(0.0, 0.0, -1.0)).is_err());
        assert!(backproject_flow(&cam, &zeros, &Vector3::new(5.0, 0.0, 1.0)).is_err());
        let mut bad = zeros.clone();
        bad.valid.set(50, 50, false);
        assert_eq!(
            backproject_flow(&cam, &bad, &Vector3::new(0.0, 0.0, 1.0)),
            Err(FlowError::NotObserved("invalid flow"))
        );
    }

    #[test]
    fn solve_examples() {
        let s = solve_voxel_flow(&[Vector3::zeros(), Vector3::zeros()], 0.1).unwrap();
        assert_eq!(s.flow, Vector3::zeros());
        assert_eq!(s.confidence, 0.0);

        let s = solve_voxel_flow(&[Vector3::x(), Vector3::y()], 0.0).unwrap();
        assert!((s.flow - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);

        let s = solve_voxel_flow(&[Vector3::x()], 0.1).unwrap();
        let expected = 1.0 / (1.0 + 0.1f64 * 0.1);
        assert!((s.flow - Vector3::new(expected, 0.0, 0.0)).norm() < 1e-12);
        assert!((s.flow.x - 0.990099).abs() < 1e-6);

        assert_eq!(solve_voxel_flow(&[], 0.1), Err(FlowError::NoObservation));
    }

    #[test]
    fn confidence_of_orthonormal_triplet_is_one() {
        let s = solve_voxel_flow(&[Vector3::x(), Vector3::y(), Vector3::z()], 0.0).unwrap();
        assert!((s.confidence - 1.0).abs() < 1e-12);
        let s = solve_voxel_flow(&[Vector3::x(), Vector3::y()], 0.0).unwrap();
        assert_eq!(s.confidence, 0.0);
    }

    fn ridge_objective(obs: &[Vector3<f64>], alpha0: f64, f: &Vector3<f64>) -> f64 {
        let m = obs.len() as f64;
        let alpha = alpha0 / m * obs.iter().map(|u| u.norm_squared()).sum::<f64>();
        obs.iter()
            .map(|u| (u.dot(f) - u.norm_squared()).powi(2))
            .sum::<f64>()
            + alpha * alpha * f.norm_squared()
    }

    fn arb_obs() -> impl Strategy<Value = Vec<Vector3<f64>>> {
        prop::collection::vec(
            (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b, c)| Vector3::new(a, b, c)),
            1..5,
        )
    }

    proptest! {
        #[test]
        fn solution_is_local_minimum(obs in arb_obs(), alpha0 in 0.0f64..1.0) {
            let f = solve_voxel_flow(&obs, alpha0).unwrap().flow;
            let base = ridge_objective(&obs, alpha0, &f);
            for dx in [-1i32, 0, 1] {
                for dy in [-1i32, 0, 1] {
                    for dz in [-1i32, 0, 1] {
                        if (dx, dy, dz) == (0, 0, 0) { continue; }
                        let d = Vector3::new(dx as f64, dy as f64, dz as f64).normalize() * 1e-4;
                        prop_assert!(base <= ridge_objective(&obs, alpha0, &(f + d)) + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn norm_shrinks_with_alpha0(obs in arb_obs(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let f_lo = solve_voxel_flow(&obs, lo).unwrap().flow.norm();
            let f_hi = solve_voxel_flow(&obs, hi).unwrap().flow.norm();
            prop_assert!(f_hi <= f_lo * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn grid_indexing_round_trips() {
        let g = VoxelGridSpec::new(Vector3::new(-1.0, 0.0, 2.0), 0.25, [3, 4, 5]).unwrap();
        for i in 0..g.len() {
            let c = g.coords(i);
            assert_eq!(g.index(c[0], c[1], c[2]), i);
            assert!(g.voxel_contains(i, &g.center(i)));
        }
        assert!((g.center(0) - Vector3::new(-0.875, 0.125, 2.125)).norm() < 1e-15);
        assert!(VoxelGridSpec::new(Vector3::zeros(), 0.0, [1, 1, 1]).is_err());
        assert!(VoxelGridSpec::new(Vector3::zeros(), 1.0, [1, 0, 1]).is_err());
    }

    #[test]
    fn empty_masks_occupy_nothing() {
        let cam = front_camera();
        let grid = VoxelGridSpec::new(Vector3::new(-0.2, -0.2, 1.8), 0.1, [4, 4, 4]).unwrap();
        let field = fuse_flow_grid(
            &[cam, cam],
            &[FlowMap::zeros(101, 101), FlowMap::zeros(101, 101)],
            &[DepthMap::constant(101, 101, 2.0), DepthMap::constant(101, 101, 2.0)],
            &[Raster::filled(101, 101, false), Raster::filled(101, 101, false)],
            &grid,
            0.1,
        )
        .unwrap();
        assert_eq!(field.occupied_count(), 0);
        assert!(matches!(
            fuse_flow_grid(&[], &[], &[], &[], &grid, 0.1),
            Err(FlowError::EmptyCameraList)
        ));
    }

    #[test]
    fn single_camera_never_occupies() {
        let cam = front_camera();
        let grid = VoxelGridSpec::new(Vector3::new(-0.2, -0.2, 1.8), 0.1, [4, 4, 4]).unwrap();
        let field = fuse_flow_grid(
            &[cam],
            &[FlowMap::zeros(101, 101)],
            &[DepthMap::constant(101, 101, 2.0)],
            &[Raster::filled(101, 101, true)],
            &grid,
            0.1,
        )
        .unwrap();
        assert_eq!(field.occupied_count(), 0);
        // The same view twice satisfies the two-camera rule.
        let field = fuse_flow_grid(
            &[cam, cam],
            &[FlowMap::zeros(101, 101), FlowMap::zeros(101, 101)],
            &[DepthMap::constant(101, 101, 2.0), DepthMap::constant(101, 101, 2.0)],
            &[Raster::filled(101, 101, true), Raster::filled(101, 101, true)],
            &grid,
            0.1,
        )
        .unwrap();
        // only the z-slabs within 1.5 voxels of the hinted depth
        assert!(field.occupied_count() > 0);
        for i in field.occupied_indices() {
            assert!((grid.center(i).z - 2.0).abs() <= 0.15 + 1e-12);
        }
    }
}
