//! Pinhole camera with pose and rolling-shutter readout schedule.
//!
//! Inputs are assumed undistorted. The pose maps world points into the
//! camera frame (`x_cam = R x_world + t`) using the OpenCV axis convention:
//! +x right, +y down, +z forward.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}; back-projection needs depth > 0")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (error {0:.3e})")]
    InvalidRotation(f64),
    #[error("invalid readout schedule: {0}")]
    InvalidReadout(String),
}

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        let bad = |msg: String| Err(CameraError::InvalidIntrinsics(msg));
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got {fx}, {fy}"));
        }
        if width == 0 || height == 0 {
            return bad(format!("empty resolution {width}x{height}"));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return bad(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CameraError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - 1.0).abs();
        let err = ortho.max(det);
        if !(err <= ROTATION_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(CameraError::InvalidRotation(err));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, CameraError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(CameraError::InvalidRotation(1.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScanDirection {
    #[default]
    TopToBottom,
    BottomToTop,
}

/// Sensor row readout timing. `line_time == 0` is a global shutter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutSchedule {
    pub line_time: f64,
    pub first_line_offset: f64,
    pub scan_direction: ScanDirection,
}

impl Default for ReadoutSchedule {
    fn default() -> Self {
        Self::global()
    }
}

impl ReadoutSchedule {
    pub fn new(
        line_time: f64,
        first_line_offset: f64,
        scan_direction: ScanDirection,
    ) -> Result<Self, CameraError> {
        if !(line_time >= 0.0 && line_time.is_finite()) || !first_line_offset.is_finite() {
            return Err(CameraError::InvalidReadout(format!(
                "line_time {line_time}, offset {first_line_offset}"
            )));
        }
        Ok(Self {
            line_time,
            first_line_offset,
            scan_direction,
        })
    }

    pub fn global() -> Self {
        Self {
            line_time: 0.0,
            first_line_offset: 0.0,
            scan_direction: ScanDirection::TopToBottom,
        }
    }

    pub fn rolling(line_time: f64) -> Self {
        Self {
            line_time,
            first_line_offset: 0.0,
            scan_direction: ScanDirection::TopToBottom,
        }
    }

    pub fn is_global(&self) -> bool {
        self.line_time == 0.0
    }

    /// Row index in scan order for image row `v`, clamped to the sensor.
    #[inline]
    pub fn scan_row(&self, v: f64, height: usize) -> f64 {
        let last = (height.max(1) - 1) as f64;
        let row = v.clamp(0.0, last);
        match self.scan_direction {
            ScanDirection::TopToBottom => row,
            ScanDirection::BottomToTop => last - row,
        }
    }

    /// Capture delay of image point `p` relative to frame start.
    #[inline]
    pub fn pixel_delay(&self, p: &Vector2<f64>, height: usize) -> f64 {
        self.first_line_offset + self.scan_row(p.y, height) * self.line_time
    }

    /// Capture delay of image row `v` (scan-order conversion included).
    #[inline]
    pub fn row_delay(&self, v: f64, height: usize) -> f64 {
        self.first_line_offset + self.scan_row(v, height) * self.line_time
    }

    /// Image-space gradient of the delay at `p`; zero where the row is clamped.
    pub fn delay_gradient(&self, p: &Vector2<f64>, height: usize) -> Vector2<f64> {
        let last = (height.max(1) - 1) as f64;
        if p.y < 0.0 || p.y > last {
            return Vector2::zeros();
        }
        let dv = match self.scan_direction {
            ScanDirection::TopToBottom => self.line_time,
            ScanDirection::BottomToTop => -self.line_time,
        };
        Vector2::new(0.0, dv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub readout: ReadoutSchedule,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose, readout: ReadoutSchedule) -> Self {
        Self {
            intrinsics,
            pose,
            readout,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    #[inline]
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.pose.transform_point(x)
    }

    /// Projects a camera-frame point (no depth check).
    #[inline]
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        let k = &self.intrinsics;
        Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Projection, CameraError> {
        let pc = self.world_to_camera(x);
        if !(pc.z > 0.0) {
            return Err(CameraError::BehindCamera(pc.z));
        }
        Ok(Projection {
            pixel: self.project_camera_point(&pc),
            depth: pc.z,
        })
    }

    /// Lifts image point `p` to the world point at camera-frame depth `depth`.
    pub fn backproject(&self, p: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, CameraError> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(CameraError::InvalidDepth(depth));
        }
        let k = &self.intrinsics;
        let pc = Vector3::new(
            (p.x - k.cx) * depth / k.fx,
            (p.y - k.cy) * depth / k.fy,
            depth,
        );
        let r = self.pose.rotation();
        Ok(r.transpose() * (pc - self.pose.translation()))
    }

    pub fn pixel_delay(&self, p: &Vector2<f64>) -> f64 {
        self.readout.pixel_delay(p, self.height())
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// True when `p` lies inside the pixel-center extent of the image.
    pub fn in_bounds(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width() - 1) as f64
            && p.y <= (self.height() - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simple_camera() -> Camera {
        Camera::new(
            Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap(),
            Pose::identity(),
            ReadoutSchedule::global(),
        )
    }

    #[test]
    fn project_principal_axis() {
        let p = simple_camera().project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p.pixel, Vector2::new(50.0, 50.0));
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn project_off_axis() {
        let p = simple_camera().project(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(p.pixel.x, 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.pixel.y, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let err = simple_camera().project(&Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(err, Err(CameraError::BehindCamera(_))));
    }

    #[test]
    fn backproject_examples() {
        let cam = simple_camera();
        let x = cam.backproject(&Vector2::new(50.0, 50.0), 1.0).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 1.0));
        let x = cam.backproject(&Vector2::new(60.0, 50.0), 2.0).unwrap();
        assert_abs_diff_eq!(x.x, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(x.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x.z, 2.0, epsilon = 1e-12);
        assert!(matches!(
            cam.backproject(&Vector2::new(1.0, 1.0), 0.0),
            Err(CameraError::InvalidDepth(_))
        ));
    }

    #[test]
    fn round_trip_random_points_posed_camera() {
        let pose = Pose::look_at(
            Vector3::new(1.0, 0.5, 3.0),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let cam = Camera::new(
            Intrinsics::new(320.0, 300.0, 319.5, 239.5, 640, 480).unwrap(),
            pose,
            ReadoutSchedule::global(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst_px: f64 = 0.0;
        let mut worst_z: f64 = 0.0;
        for _ in 0..100 {
            let p = Vector2::new(rng.gen_range(0.0..639.0), rng.gen_range(0.0..479.0));
            let z = rng.gen_range(0.1..20.0);
            let x = cam.backproject(&p, z).unwrap();
            let q = cam.project(&x).unwrap();
            worst_px = worst_px.max((q.pixel - p).norm());
            worst_z = worst_z.max((q.depth - z).abs());
        }
        assert!(worst_px < 1e-6, "{worst_px}");
        assert!(worst_z < 1e-9, "{worst_z}");
    }

    #[test]
    fn pose_inverse_composes_to_identity() {
        let pose = Pose::look_at(
            Vector3::new(-2.0, 1.0, 0.5),
            Vector3::new(0.3, -0.2, 0.1),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let id = pose.inverse().compose(&pose);
        assert!((id.rotation() - Matrix3::identity()).abs().max() < 1e-9);
        assert!(id.translation().norm() < 1e-9);
        let c = pose.center();
        assert!(pose.transform_point(&c).norm() < 1e-12);
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.001;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 10.0, 0.0, 10, 10).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 9.9, 0.0, 10, 10).is_ok());
    }

    #[test]
    fn pixel_delay_examples() {
        let global = ReadoutSchedule::global();
        for v in [0.0, 10.0, 99.0] {
            assert_eq!(global.pixel_delay(&Vector2::new(3.0, v), 100), 0.0);
        }
        let rolling = ReadoutSchedule::rolling(2.85e-6);
        let d = rolling.pixel_delay(&Vector2::new(0.0, 500.0), 720);
        assert_abs_diff_eq!(d, 1.425e-3, epsilon = 1e-15);

        let btt = ReadoutSchedule::new(2.85e-6, 0.0, ScanDirection::BottomToTop).unwrap();
        assert_eq!(btt.pixel_delay(&Vector2::new(0.0, 719.0), 720), 0.0);
        assert_abs_diff_eq!(
            btt.pixel_delay(&Vector2::new(0.0, 0.0), 720),
            719.0 * 2.85e-6,
            epsilon = 1e-15
        );
        // clamped outside the sensor
        assert_eq!(rolling.pixel_delay(&Vector2::new(0.0, -4.0), 720), 0.0);
    }

    #[test]
    fn pixel_delay_is_affine_in_row() {
        let s = ReadoutSchedule::new(3e-6, 1e-4, ScanDirection::TopToBottom).unwrap();
        let d = |v: f64| s.pixel_delay(&Vector2::new(0.0, v), 1000);
        let (a, b, c) = (d(10.0), d(20.0), d(30.0));
        assert_abs_diff_eq!(b - a, c - b, epsilon = 1e-15);
        assert!(b > a);
    }
}
