//! Planar and spatial rigid transforms, pinhole intrinsics and point clouds.
//!
//! Conventions: angles are radians wrapped to (-π, π]; the ego frame is
//! x forward, y left, z up; the camera frame is x right, y down, z forward.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into (-π, π]. Angles already in range are returned as-is.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Ground-plane pose (x, y, θ).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// `self ∘ other`: `other` expressed in `self`'s frame, mapped to the parent frame.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Maps a point given in this pose's frame to the parent frame.
    pub fn transform_point(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Homogeneous 3×3 matrix.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix3::new(c, -s, self.x, s, c, self.y, 0.0, 0.0, 1.0)
    }
}

pub fn pose2_compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn pose2_inverse(a: &Pose2) -> Pose2 {
    a.inverse()
}

/// Pose of `frame` expressed in `node`'s frame: `node⁻¹ ∘ frame`.
pub fn relative_pose(node: &Pose2, frame: &Pose2) -> Pose2 {
    node.inverse().compose(frame)
}

/// Inverse of [`relative_pose`]: `node ∘ rel`.
pub fn global_from_relative(node: &Pose2, rel: &Pose2) -> Pose2 {
    node.compose(rel)
}

/// Full 6-DoF rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    /// Builds a pose from a (w, x, y, z) quaternion, normalizing it.
    pub fn from_quaternion(translation: Vector3<f64>, w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = nalgebra::Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::input("degenerate quaternion"));
        }
        Ok(Self {
            translation,
            rotation: UnitQuaternion::from_quaternion(q),
        })
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            translation: Vector3::new(x, y, z),
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Yaw-only pose at height `z`.
    pub fn from_pose2(p: &Pose2, z: f64) -> Self {
        Self {
            translation: Vector3::new(p.x, p.y, z),
            rotation: UnitQuaternion::from_euler_angles(0.0, 0.0, p.theta),
        }
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            translation: self.translation + self.rotation * other.translation,
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let inv = self.rotation.inverse();
        Pose3 {
            translation: -(inv * self.translation),
            rotation: inv,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        self.rotation
            .to_homogeneous()
            .append_translation(&self.translation)
    }

    /// Camera (x right, y down, z forward) to ego (x forward, y left, z up).
    pub fn camera_to_ego() -> Pose3 {
        let r = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        Pose3 {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
        }
    }
}

/// Projects a 6-DoF pose onto the ground plane (x, y, ZYX yaw).
pub fn pose2_from_pose3(p: &Pose3) -> Result<Pose2> {
    let (_roll, pitch, yaw) = p.rotation.euler_angles();
    if pitch.abs() > 89f64.to_radians() {
        return Err(Error::input(format!(
            "pitch {:.2} deg is gimbal-degenerate, trajectory sample unusable",
            pitch.to_degrees()
        )));
    }
    Ok(Pose2::new(p.translation.x, p.translation.y, yaw))
}

/// Pinhole intrinsics of the left camera plus stereo baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 128.0,
            fy: 128.0,
            cx: 128.0,
            cy: 48.0,
            baseline: 0.5,
            width: 256,
            height: 96,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.baseline > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Camera-frame point for pixel (u, v) at depth `depth` along z.
    /// Returns `None` for non-positive or non-finite depth.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Option<Vector3<f64>> {
        if !(depth > 0.0) || !depth.is_finite() {
            return None;
        }
        Some(Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        ))
    }

    /// Pixel coordinates of a camera-frame point in front of the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if !(p.z > 0.0) {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

pub fn unproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Option<Vector3<f64>> {
    k.unproject(u, v, depth)
}

/// A 3D point carrying a semantic class ID.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub pos: Vector3<f64>,
    pub label: u8,
}

impl LabeledPoint {
    pub fn new(x: f64, y: f64, z: f64, label: u8) -> Self {
        Self {
            pos: Vector3::new(x, y, z),
            label,
        }
    }
}

pub fn transform_points(points: &[LabeledPoint], pose: &Pose3) -> Vec<LabeledPoint> {
    points
        .iter()
        .map(|p| LabeledPoint {
            pos: pose.transform_point(&p.pos),
            label: p.label,
        })
        .collect()
}
