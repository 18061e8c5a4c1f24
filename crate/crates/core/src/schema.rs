//! Serialized building blocks shared by the scene and robot files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math::{Pose, Quat, Vec3};
use crate::mesh::{MeshError, TriMesh};

pub const SPHERE_SEGMENTS: u32 = 48;
pub const SPHERE_RINGS: u32 = 24;
pub const CYLINDER_SEGMENTS: u32 = 32;

/// A pose as written in JSON. Exactly one rotation form may be given;
/// none means identity.
///
/// - `quat`: `[w, x, y, z]`
/// - `rpy_deg`: roll/pitch/yaw in degrees, applied as `Rz(yaw)·Ry(pitch)·Rx(roll)`
/// - `look_at`: camera optical frame at `pos` looking at this point, with `up`
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    #[serde(default)]
    pub pos: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quat: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy_deg: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub look_at: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub up: Option<[f64; 3]>,
}

impl PoseSpec {
    pub fn from_pose(p: &Pose) -> PoseSpec {
        PoseSpec { pos: p.position.into(), quat: Some(p.rotation.into()), ..Default::default() }
    }

    pub fn resolve(&self) -> Result<Pose, String> {
        let forms = [self.quat.is_some(), self.rpy_deg.is_some(), self.look_at.is_some()];
        if forms.iter().filter(|&&f| f).count() > 1 {
            return Err("pose gives more than one of quat/rpy_deg/look_at".into());
        }
        let pos = Vec3::from(self.pos);
        if !pos.is_finite() {
            return Err("non-finite position".into());
        }
        let rotation = if let Some(q) = self.quat {
            let q = Quat::from(q);
            if !q.is_finite() || q.norm() < 1e-9 {
                return Err(format!("invalid quaternion {:?}", self.quat.unwrap()));
            }
            q.normalized()
        } else if let Some([r, p, y]) = self.rpy_deg {
            (Quat::rot_z(y.to_radians()) * Quat::rot_y(p.to_radians()) * Quat::rot_x(r.to_radians())).normalized()
        } else if let Some(target) = self.look_at {
            let up = self.up.map(Vec3::from).unwrap_or(Vec3::Z);
            if (Vec3::from(target) - pos).norm() < 1e-12 {
                return Err("look_at target coincides with position".into());
            }
            return Ok(Pose::look_at(pos, Vec3::from(target), up));
        } else {
            Quat::IDENTITY
        };
        Ok(Pose::new(pos, rotation))
    }
}

/// Mesh source: an OBJ file (path relative to the referencing file) or a
/// built-in primitive. Box dims are full extents; sphere `[radius]`;
/// cylinder `[radius, height]` along Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshSpec {
    Obj(String),
    Box([f64; 3]),
    Sphere([f64; 1]),
    Cylinder([f64; 2]),
}

impl MeshSpec {
    /// Builds the mesh and reports how many degenerate triangles were dropped.
    pub fn build(&self, base_dir: &Path) -> Result<(TriMesh, usize), MeshError> {
        match self {
            MeshSpec::Obj(p) => TriMesh::load_obj(&base_dir.join(p)),
            MeshSpec::Box(d) => Ok((TriMesh::cuboid(Vec3::from(*d))?, 0)),
            MeshSpec::Sphere([r]) => Ok((TriMesh::uv_sphere(*r, SPHERE_SEGMENTS, SPHERE_RINGS)?, 0)),
            MeshSpec::Cylinder([r, h]) => Ok((TriMesh::cylinder(*r, *h, CYLINDER_SEGMENTS)?, 0)),
        }
    }
}

/// Left or right hand/arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Names end up as whitespace-separated tokens in the raw log.
pub fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.chars().any(char::is_whitespace)
}
