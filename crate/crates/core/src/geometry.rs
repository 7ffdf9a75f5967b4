//! Rigid poses, the pinhole camera and pose error metrics.
//!
//! Poses map world points into the camera frame (`x_c = R x_w + t`) with
//! column-vector points. The camera looks down `+z`, `u` grows to the right
//! and `v` grows downwards.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// World-to-camera rigid transform.
///
/// The unit quaternion is the canonical representation; the rotation matrix
/// is derived from it once at construction so that serialization through the
/// quaternion is lossless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    quaternion: UnitQuaternion<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose from a rotation matrix, rejecting matrices that are not
    /// proper rotations within `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("R^T R deviates from I by {ortho:e}")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rotation));
        Ok(Self::from_quaternion(q, translation))
    }

    pub fn from_quaternion(quaternion: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        let rotation = *quaternion.to_rotation_matrix().matrix();
        Self { quaternion, rotation, translation }
    }

    pub fn identity() -> Self {
        Self::from_quaternion(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Rotation given as an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::from_quaternion(UnitQuaternion::from_scaled_axis(axis_angle), translation)
    }

    /// Camera at `center` looking at `target`, with `up` roughly opposite to
    /// the image `v` axis.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - center;
        if forward.norm() < 1e-12 {
            return Err(Error::DegenerateDirection);
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::DegenerateDirection);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rotation));
        let r = q.to_rotation_matrix();
        Ok(Self::from_quaternion(q, -(r * center)))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.quaternion
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates, `C = -R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn inverse_transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point - self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::from_quaternion(self.quaternion * other.quaternion, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.quaternion.inverse();
        Pose::from_quaternion(qi, -(qi * self.translation))
    }

    /// Left retraction `exp(δ) ∘ self` with `δ = (ρ, φ)`: translational part
    /// first, rotational part (axis-angle) second.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let (dq, dt) = se3_exp(delta);
        Pose::from_quaternion(dq * self.quaternion, dq * self.translation + dt)
    }
}

/// SE(3) exponential map; returns the rotation and translation of `exp(δ)`.
pub fn se3_exp(delta: &Vector6<f64>) -> (UnitQuaternion<f64>, Vector3<f64>) {
    let rho = Vector3::new(delta[0], delta[1], delta[2]);
    let phi = Vector3::new(delta[3], delta[4], delta[5]);
    let theta = phi.norm();
    let k = phi.cross_matrix();
    let (a, b) = if theta < 1e-6 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let v = Matrix3::identity() + k * a + k * k * b;
    (UnitQuaternion::from_scaled_axis(phi), v * rho)
}

/// Pinhole intrinsics and image size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidCamera("cx outside (0, width)".into()));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidCamera("cy outside (0, height)".into()));
        }
        Ok(())
    }

    /// Pixel of a camera-frame point; caller guarantees positive depth.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> PixelPoint {
        PixelPoint::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame point at `depth` along the ray of `pixel`.
    pub fn unproject(&self, pixel: &PixelPoint, depth: f64) -> Vector3<f64> {
        Vector3::new((pixel.u - self.cx) / self.fx * depth, (pixel.v - self.cy) / self.fy * depth, depth)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, pixel: &PixelPoint, margin: f64) -> bool {
        pixel.u >= -margin
            && pixel.u <= self.width as f64 + margin
            && pixel.v >= -margin
            && pixel.v <= self.height as f64 + margin
    }
}

/// Intrinsics plus world-to-camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self { intrinsics, pose })
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    pub fn with_pose(&self, pose: Pose) -> Camera {
        Camera { intrinsics: self.intrinsics, pose }
    }
}

/// Sub-pixel image coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Projects a world point; returns the pixel and the camera-frame depth.
pub fn project(camera: &Camera, point: &Vector3<f64>) -> Result<(PixelPoint, f64)> {
    let p = camera.pose.transform_point(point);
    if !(p.z > 0.0) {
        return Err(Error::NonPositiveDepth(p.z));
    }
    Ok((camera.intrinsics.project_camera_point(&p), p.z))
}

/// World point at `depth` along the ray through `pixel`.
pub fn backproject(camera: &Camera, pixel: &PixelPoint, depth: f64) -> Vector3<f64> {
    camera.pose.inverse_transform_point(&camera.intrinsics.unproject(pixel, depth))
}

/// True iff the point is in front of the camera and projects inside the
/// image grown by `margin` pixels on every side (bounds inclusive).
pub fn in_frustum(camera: &Camera, point: &Vector3<f64>, margin: f64) -> bool {
    match project(camera, point) {
        Ok((px, _)) => camera.intrinsics.contains(&px, margin),
        Err(_) => false,
    }
}

/// Unit vector from `center` towards the camera center.
pub fn viewing_direction(center: &Vector3<f64>, camera: &Camera) -> Result<Vector3<f64>> {
    let d = camera.center() - center;
    let n = d.norm();
    if n < 1e-12 {
        return Err(Error::DegenerateDirection);
    }
    Ok(d / n)
}

/// Translation error (scene units) and rotation error (degrees).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub translation: f64,
    pub rotation_deg: f64,
}

/// `ΔR = arccos((tr(R̂ᵀR) − 1)/2)` and `Δt = ‖t̂ − t‖`.
///
/// The angle is evaluated as `atan2(sin, cos)` with the sine taken from the
/// skew part of `R̂ᵀR`. This is the same angle as the clamped arccos but keeps
/// full precision near the identity, where arccos resolves only ~1e-8 rad.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> PoseError {
    let m = estimate.rotation().transpose() * truth.rotation();
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = (0.5 * skew.norm()).min(1.0);
    PoseError {
        translation: (estimate.translation() - truth.translation()).norm(),
        rotation_deg: sin.atan2(cos).to_degrees(),
    }
}
