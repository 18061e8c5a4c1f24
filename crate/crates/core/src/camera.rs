//! Static and socket-attached cameras, pinhole/orthographic projection and
//! stereo pairs.
//!
//! Camera optical frame: +X right, +Y down, +Z forward. Rays go through pixel
//! centers, so pixel `(u, v)` looks along `((u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvh::Ray;
use crate::math::{Pose, Vec3};
use crate::schema::PoseSpec;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("field of view must be in (0, 180) degrees, got {0}")]
    BadFov(f64),
    #[error("image size must be at least 1x1, got {0}x{1}")]
    BadSize(u32, u32),
    #[error("camera '{camera}': clip planes need 0 < near < far (near={near}, far={far})")]
    BadClip { camera: String, near: f64, far: f64 },
    #[error("stereo baseline must be positive, got {0}")]
    BadBaseline(f64),
    #[error("camera '{camera}' is attached to missing socket '{socket}'")]
    MissingSocket { camera: String, socket: String },
    #[error("camera '{camera}': {detail}")]
    Invalid { camera: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

pub fn intrinsics_from_fov(horizontal_fov_deg: f64, width: u32, height: u32) -> Result<Intrinsics, CameraError> {
    if !(horizontal_fov_deg > 0.0 && horizontal_fov_deg < 180.0) {
        return Err(CameraError::BadFov(horizontal_fov_deg));
    }
    if width == 0 || height == 0 {
        return Err(CameraError::BadSize(width, height));
    }
    let fx = (width as f64 / 2.0) / (horizontal_fov_deg.to_radians() / 2.0).tan();
    Ok(Intrinsics { width, height, fx, fy: fx, cx: width as f64 / 2.0, cy: height as f64 / 2.0 })
}

/// Orthographic intrinsics: `fx = fy` in pixels per meter.
pub fn intrinsics_from_ortho_width(width_m: f64, width: u32, height: u32) -> Result<Intrinsics, CameraError> {
    if width == 0 || height == 0 {
        return Err(CameraError::BadSize(width, height));
    }
    if !(width_m > 0.0 && width_m.is_finite()) {
        return Err(CameraError::Invalid { camera: String::new(), detail: format!("ortho width {width_m}") });
    }
    let f = width as f64 / width_m;
    Ok(Intrinsics { width, height, fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Perspective,
    Orthographic { width_m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowRules {
    #[serde(default = "yes")]
    pub location: bool,
    #[serde(default = "yes")]
    pub rotation: bool,
}

fn yes() -> bool {
    true
}

impl Default for FollowRules {
    fn default() -> Self {
        FollowRules { location: true, rotation: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    Static(Pose),
    Attached { socket: String, offset: Pose, follow: FollowRules },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraDef {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub projection: Projection,
    pub placement: Placement,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projected {
    Pixel { u: f64, v: f64 },
    Behind,
}

impl Projected {
    pub fn pixel(self) -> Option<(f64, f64)> {
        match self {
            Projected::Pixel { u, v } => Some((u, v)),
            Projected::Behind => None,
        }
    }
}

/// Pinhole projection of a camera-frame point; points at or before the near
/// plane are reported as behind the camera.
pub fn project(intr: &Intrinsics, point_cam: Vec3, near: f64) -> Projected {
    if point_cam.z <= near {
        return Projected::Behind;
    }
    Projected::Pixel {
        u: intr.fx * point_cam.x / point_cam.z + intr.cx,
        v: intr.fy * point_cam.y / point_cam.z + intr.cy,
    }
}

/// Inverse of [`project`] for a given planar depth.
pub fn backproject(intr: &Intrinsics, u: f64, v: f64, depth: f64) -> Vec3 {
    Vec3::new((u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth)
}

impl CameraDef {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(CameraError::BadClip { camera: self.name.clone(), near: self.near, far: self.far });
        }
        let i = &self.intrinsics;
        if i.width == 0 || i.height == 0 {
            return Err(CameraError::BadSize(i.width, i.height));
        }
        if !(i.fx > 0.0 && i.fy > 0.0) {
            return Err(CameraError::Invalid {
                camera: self.name.clone(),
                detail: "focal lengths must be positive".into(),
            });
        }
        Ok(())
    }

    /// Projects a camera-frame point with this camera's projection model.
    pub fn project(&self, point_cam: Vec3) -> Projected {
        match self.projection {
            Projection::Perspective => project(&self.intrinsics, point_cam, self.near),
            Projection::Orthographic { .. } => {
                if point_cam.z <= self.near {
                    return Projected::Behind;
                }
                let i = &self.intrinsics;
                Projected::Pixel { u: i.fx * point_cam.x + i.cx, v: i.fy * point_cam.y + i.cy }
            }
        }
    }

    /// World-space ray through the center of pixel `(u, v)`. For perspective
    /// cameras the ray parameter equals camera-frame depth.
    pub fn pixel_ray(&self, pose: &Pose, u: u32, v: u32) -> Ray {
        let i = &self.intrinsics;
        let x = (u as f64 + 0.5 - i.cx) / i.fx;
        let y = (v as f64 + 0.5 - i.cy) / i.fy;
        let (origin, dir) = match self.projection {
            Projection::Perspective => (pose.position, pose.transform_vector(Vec3::new(x, y, 1.0))),
            Projection::Orthographic { .. } => {
                (pose.transform_point(Vec3::new(x, y, 0.0)), pose.transform_vector(Vec3::Z))
            }
        };
        Ray { origin, dir, t_min: self.near, t_max: self.far }
    }

    /// Camera-frame point for pixel `(u, v)` (integer pixel, center sampled) at planar `depth`.
    pub fn backproject_pixel(&self, u: u32, v: u32, depth: f64) -> Vec3 {
        let i = &self.intrinsics;
        let (pu, pv) = (u as f64 + 0.5, v as f64 + 0.5);
        match self.projection {
            Projection::Perspective => backproject(i, pu, pv, depth),
            Projection::Orthographic { .. } => Vec3::new((pu - i.cx) / i.fx, (pv - i.cy) / i.fy, depth),
        }
    }

    pub fn socket(&self) -> Option<&str> {
        match &self.placement {
            Placement::Attached { socket, .. } => Some(socket),
            Placement::Static(_) => None,
        }
    }
}

/// World pose of a camera. Attached cameras compose the socket pose with
/// their offset; channels the rules do not follow keep `initial`'s value
/// (the camera's world pose when the scene started).
pub fn resolve_camera_pose(
    cam: &CameraDef,
    socket_world: Option<&Pose>,
    initial: Option<&Pose>,
) -> Result<Pose, CameraError> {
    match &cam.placement {
        Placement::Static(p) => Ok(*p),
        Placement::Attached { socket, offset, follow } => {
            let s = socket_world
                .ok_or_else(|| CameraError::MissingSocket { camera: cam.name.clone(), socket: socket.clone() })?;
            let full = s.compose(offset);
            let init = initial.copied().unwrap_or(full);
            Ok(Pose::new(
                if follow.location { full.position } else { init.position },
                if follow.rotation { full.rotation } else { init.rotation },
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoPair {
    pub left: CameraDef,
    pub right: CameraDef,
    pub baseline: f64,
}

/// Left keeps the base placement; right is shifted `+baseline` along the
/// camera's local X. Names get `_L`/`_R` suffixes.
pub fn make_stereo_pair(base: &CameraDef, baseline: f64) -> Result<StereoPair, CameraError> {
    if !(baseline > 0.0 && baseline.is_finite()) {
        return Err(CameraError::BadBaseline(baseline));
    }
    let shift = Pose::from_translation(Vec3::new(baseline, 0.0, 0.0));
    let mut left = base.clone();
    left.name = format!("{}_L", base.name);
    let mut right = base.clone();
    right.name = format!("{}_R", base.name);
    right.placement = match &base.placement {
        Placement::Static(p) => Placement::Static(p.compose(&shift)),
        Placement::Attached { socket, offset, follow } => {
            Placement::Attached { socket: socket.clone(), offset: offset.compose(&shift), follow: *follow }
        }
    };
    Ok(StereoPair { left, right, baseline })
}

/// Camera block of the scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ortho_width_m: Option<f64>,
    pub width: u32,
    pub height: u32,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub placement: PlacementSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stereo: Option<StereoSpec>,
}

fn default_near() -> f64 {
    0.05
}

fn default_far() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlacementSpec {
    Static {
        #[serde(rename = "static")]
        pose: PoseSpec,
    },
    Socket {
        socket: String,
        #[serde(default)]
        offset: PoseSpec,
        #[serde(default)]
        follow: FollowRules,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoSpec {
    pub baseline_m: f64,
}

impl CameraSpec {
    /// Expands into one camera, or two when a stereo baseline is given.
    pub fn build(&self) -> Result<Vec<CameraDef>, CameraError> {
        let invalid = |detail: String| CameraError::Invalid { camera: self.name.clone(), detail };
        let (intrinsics, projection) = match (self.fov_deg, self.ortho_width_m) {
            (Some(fov), None) => (intrinsics_from_fov(fov, self.width, self.height)?, Projection::Perspective),
            (None, Some(w)) => (
                intrinsics_from_ortho_width(w, self.width, self.height)
                    .map_err(|_| invalid(format!("bad ortho width {w}")))?,
                Projection::Orthographic { width_m: w },
            ),
            _ => return Err(invalid("exactly one of fov_deg / ortho_width_m is required".into())),
        };
        let placement = match &self.placement {
            PlacementSpec::Static { pose } => Placement::Static(pose.resolve().map_err(invalid)?),
            PlacementSpec::Socket { socket, offset, follow } => Placement::Attached {
                socket: socket.clone(),
                offset: offset.resolve().map_err(invalid)?,
                follow: *follow,
            },
        };
        let cam =
            CameraDef { name: self.name.clone(), intrinsics, projection, placement, near: self.near, far: self.far };
        cam.validate()?;
        match self.stereo {
            Some(s) => {
                let pair = make_stereo_pair(&cam, s.baseline_m)?;
                Ok(vec![pair.left, pair.right])
            }
            None => Ok(vec![cam]),
        }
    }
}
