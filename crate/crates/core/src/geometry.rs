//! Pinhole cameras, rigid poses and the pose-error metrics used for evaluation.
//!
//! Poses map world points into the camera frame as `x_cam = R (X - C)`, where
//! `R` is the world-to-camera rotation and `C` the camera center in world
//! coordinates. Pixel `(col, row)` has its center at integer coordinates.

use nalgebra::{Matrix3, Point2, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type WorldPoint = Point3<f64>;
pub type ImagePoint = Point2<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Nearest pixel `(col, row)` to `p`, rounding half up, or `None` when it
    /// falls outside the image.
    pub fn nearest_pixel(&self, p: &ImagePoint) -> Option<(usize, usize)> {
        nearest_pixel(p, self.width as usize, self.height as usize)
    }

    /// Normalized camera ray `((x - cx) / fx, (y - cy) / fy, 1)`.
    pub fn ray(&self, p: &ImagePoint) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }
}

/// Nearest pixel in a `width x height` grid, rounding half up.
pub fn nearest_pixel(p: &ImagePoint, width: usize, height: usize) -> Option<(usize, usize)> {
    let col = (p.x + 0.5).floor();
    let row = (p.y + 0.5).floor();
    if col >= 0.0 && row >= 0.0 && col < width as f64 && row < height as f64 {
        Some((col as usize, row as usize))
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Rotation3<f64>,
    center: Vector3<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: Rotation3::identity(),
            center: Vector3::zeros(),
        }
    }

    /// Builds a pose from a world-to-camera rotation matrix and a camera
    /// center, rejecting matrices that are not proper rotations.
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.abs().max() > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (max |R^T R - I| = {:e})",
                gram.abs().max()
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected +1")));
        }
        Ok(RigidPose {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            center,
        })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, center: Vector3<f64>) -> Self {
        RigidPose { rotation, center }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, center: Vector3<f64>) -> Self {
        RigidPose {
            rotation: q.to_rotation_matrix(),
            center,
        }
    }

    /// Pose from the `x_cam = R X + t` convention.
    pub fn from_rotation_translation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        let center = -(rotation.inverse() * translation);
        RigidPose { rotation, center }
    }

    /// Camera at `eye` looking at `target`, image `y` axis aligned with `down`
    /// as far as possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye and target coincide".into()));
        }
        let z = z.normalize();
        let x = down.cross(&z);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidPose(
                "viewing direction parallel to `down`".into(),
            ));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(RigidPose {
            rotation: Rotation3::from_matrix_unchecked(r),
            center: eye,
        })
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    /// Translation `t = -R C` of the `x_cam = R X + t` convention.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation * self.center)
    }

    pub fn to_camera(&self, point: &WorldPoint) -> Vector3<f64> {
        self.rotation * (point.coords - self.center)
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> WorldPoint {
        WorldPoint::from(self.rotation.inverse() * p_cam + self.center)
    }

    /// Applies `other` after `self` in the camera frame: the resulting pose
    /// maps `X` to `other.R (self.R (X - self.C)) + other.t`.
    pub fn then(&self, other: &RigidPose) -> RigidPose {
        let rotation = other.rotation * self.rotation;
        let translation = other.rotation * self.translation() + other.translation();
        RigidPose::from_rotation_translation(rotation, translation)
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Projects a world point; `None` when it lies on or behind the image plane.
/// No bounds clipping.
pub fn project(point: &WorldPoint, pose: &RigidPose, k: &CameraIntrinsics) -> Option<ImagePoint> {
    project_camera(&pose.to_camera(point), k)
}

pub(crate) fn project_camera(p: &Vector3<f64>, k: &CameraIntrinsics) -> Option<ImagePoint> {
    if p.z <= 0.0 {
        return None;
    }
    Some(ImagePoint::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Lifts a pixel with z-depth `depth` into the world frame.
pub fn back_project(
    pixel: &ImagePoint,
    depth: f64,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<WorldPoint> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(pose.to_world(&(k.ray(pixel) * depth)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Meters.
    pub position_error: f64,
    /// Degrees, in `[0, 180]`.
    pub orientation_error: f64,
}

impl PoseError {
    pub fn between(ground_truth: &RigidPose, estimate: &RigidPose) -> Self {
        PoseError {
            position_error: position_error_m(ground_truth.center(), estimate.center()),
            orientation_error: rotation_error_deg(ground_truth.rotation(), estimate.rotation()),
        }
    }
}

/// Absolute angle of the relative rotation `R_gt^T R_est`, in degrees.
///
/// `cos` comes from the trace and `sin` from the skew-symmetric part; the
/// `atan2` of the two equals the clamped `arccos` of the trace formula but
/// keeps full precision near 0 and 180 degrees.
pub fn rotation_error_deg(r_gt: &Rotation3<f64>, r_est: &Rotation3<f64>) -> f64 {
    rotation_angle(&(r_gt.matrix().transpose() * r_est.matrix())).to_degrees()
}

pub(crate) fn rotation_angle(rel: &Matrix3<f64>) -> f64 {
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (0.5 * axis.norm()).min(1.0);
    sin.atan2(cos)
}

pub fn position_error_m(c_gt: &Vector3<f64>, c_est: &Vector3<f64>) -> f64 {
    (c_est - c_gt).norm()
}

/// Angle between two non-zero vectors in radians, robust for nearly parallel
/// and anti-parallel inputs.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}
