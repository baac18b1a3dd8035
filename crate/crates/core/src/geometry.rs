//! Coordinate frames, rigid transforms and the pinhole camera model.
//!
//! Camera frame convention: right-handed, `z` forward along the optical axis,
//! `x` right, `y` down. Pixel `(u, v)` addresses column `u`, row `v`, and the
//! integer coordinate is the pixel center.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Named coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameId {
    Camera,
    Body,
    World,
}

/// Rigid transform mapping coordinates in `from` to coordinates in `to`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
    from: FrameId,
    to: FrameId,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3, from: FrameId, to: FrameId) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::contract("pose has non-finite entries"));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).amax() > ORTHONORMAL_TOL {
            return Err(Error::contract("rotation is not orthonormal"));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::contract("rotation determinant is not +1"));
        }
        Ok(Self {
            rotation,
            translation,
            from,
            to,
        })
    }

    pub fn identity(from: FrameId, to: FrameId) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            from,
            to,
        }
    }

    pub fn from_translation(translation: Vec3, from: FrameId, to: FrameId) -> Self {
        Self {
            translation,
            ..Self::identity(from, to)
        }
    }

    /// Rotation by `angle` radians about unit `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3, from: FrameId, to: FrameId) -> Result<Self> {
        let axis = Unit::try_new(axis, 1e-12).ok_or_else(|| Error::contract("zero rotation axis"))?;
        let rotation = Rotation3::from_axis_angle(&axis, angle).into_inner();
        Self::new(rotation, translation, from, to)
    }

    /// Rotation about the z axis.
    pub fn rot_z(angle: f64, translation: Vec3, from: FrameId, to: FrameId) -> Self {
        let rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner();
        Self {
            rotation,
            translation,
            from,
            to,
        }
    }

    /// Pose of a camera whose optical axis points along world `+x` with image
    /// "up" along world `+z`, positioned at `position`.
    pub fn camera_facing_x(position: Vec3) -> Self {
        // camera x (right) = -world y, camera y (down) = -world z, camera z = world x
        let rotation = Matrix3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        );
        Self {
            rotation,
            translation: position,
            from: FrameId::Camera,
            to: FrameId::World,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn from_frame(&self) -> FrameId {
        self.from
    }

    pub fn to_frame(&self) -> FrameId {
        self.to
    }

    /// Same transform with a translation offset added on the output side.
    pub fn translated(&self, offset: Vec3) -> Self {
        Self {
            translation: self.translation + offset,
            ..self.clone()
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
            from: self.to,
            to: self.from,
        }
    }

    /// `self ∘ inner`: maps `inner.from` to `self.to`.
    pub fn compose(&self, inner: &Pose) -> Result<Pose> {
        if self.from != inner.to {
            return Err(Error::contract(format!(
                "cannot compose {:?}->{:?} after {:?}->{:?}",
                self.from, self.to, inner.from, inner.to
            )));
        }
        Ok(Pose {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
            from: inner.from,
            to: self.to,
        })
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Result<Pose> {
    a.compose(b)
}

pub fn transform_point(p: &Pose, x: &Vec3) -> Vec3 {
    p.transform_point(x)
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    from: FrameId,
    to: FrameId,
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        let m = r.rotation;
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], //
            m[1][0], m[1][1], m[1][2], //
            m[2][0], m[2][1], m[2][2],
        );
        Pose::new(rotation, Vec3::from(r.translation), r.from, r.to)
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let m = p.rotation;
        PoseRepr {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
            from: p.from,
            to: p.to,
        }
    }
}

/// Pinhole intrinsics. Serialized with keys
/// `width, height, fx, fy, cx, cy, depth_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr")]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
}

#[derive(Deserialize)]
struct IntrinsicsRepr {
    width: u32,
    height: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    depth_scale: f64,
}

impl TryFrom<IntrinsicsRepr> for Intrinsics {
    type Error = Error;

    fn try_from(r: IntrinsicsRepr) -> Result<Self> {
        Intrinsics::new(r.width, r.height, r.fx, r.fy, r.cx, r.cy, r.depth_scale)
    }
}

pub const DEFAULT_DEPTH_SCALE: f64 = 0.001;

impl Default for Intrinsics {
    /// 640x480 color stream of a consumer RGB-D camera, millimeter depth.
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            fx: 385.0,
            fy: 385.0,
            cx: 320.0,
            cy: 240.0,
            depth_scale: DEFAULT_DEPTH_SCALE,
        }
    }
}

impl Intrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64, depth_scale: f64) -> Result<Self> {
        let ok = width > 0
            && height > 0
            && fx > 0.0
            && fy > 0.0
            && (0.0..f64::from(width)).contains(&cx)
            && (0.0..f64::from(height)).contains(&cy)
            && depth_scale > 0.0
            && [fx, fy, cx, cy, depth_scale].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::contract(format!(
                "invalid intrinsics {width}x{height} fx={fx} fy={fy} cx={cx} cy={cy} scale={depth_scale}"
            )));
        }
        Ok(Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            depth_scale,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Back-projects pixel `(u, v)` with raw depth into the camera frame.
    /// Returns `None` when `raw_depth == 0` (no measurement).
    pub fn deproject_pixel(&self, u: u32, v: u32, raw_depth: u16) -> Option<Vec3> {
        debug_assert!(u < self.width && v < self.height);
        if raw_depth == 0 {
            return None;
        }
        let z = f64::from(raw_depth) * self.depth_scale;
        Some(self.deproject_metric(f64::from(u), f64::from(v), z))
    }

    /// Back-projection with a metric depth and sub-pixel coordinates.
    pub fn deproject_metric(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Analytic inverse of deprojection: `(u, v, z_meters)`.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        )
    }

    /// Direction (not normalized, `z = 1`) of the ray through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("intrinsics serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn deproject_pixel(i: &Intrinsics, u: u32, v: u32, raw_depth: u16) -> Option<Vec3> {
    i.deproject_pixel(u, v, raw_depth)
}
