//! Scene description file, loaded scene, and per-frame snapshots.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{resolve_camera_pose, CameraDef, CameraError, CameraSpec};
use crate::math::{Pose, Vec3};
use crate::mesh::{world_aabb, Aabb, MeshError, TriMesh};
use crate::robot::{RobotDef, RobotError};
use crate::schema::{valid_name, MeshSpec, PoseSpec};

/// Robot display links get instance ids from here upward; object ids must stay below.
pub const ROBOT_INSTANCE_BASE: u16 = 0xF000;
/// Class id carried by every robot link in class masks.
pub const ROBOT_CLASS_ID: u16 = 0xF000;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read scene {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scene {path}: {detail}")]
    Schema { path: String, detail: String },
    #[error("unsupported units '{0}' (expected \"m\")")]
    Units(String),
    #[error("duplicate name '{0}'")]
    DuplicateName(String),
    #[error("invalid name '{0}'")]
    BadName(String),
    #[error("object '{object}' references unknown mesh '{mesh}'")]
    DanglingMesh { object: String, mesh: String },
    #[error("object '{object}' references unknown class '{class}'")]
    UnknownClass { object: String, class: String },
    #[error("class ids must be dense from 1: {0}")]
    ClassIds(String),
    #[error("scene needs at least one camera")]
    NoCamera,
    #[error("too many objects ({0}); instance ids would collide with robot ids")]
    TooManyObjects(usize),
    #[error("mesh '{name}': {source}")]
    Mesh {
        name: String,
        #[source]
        source: MeshError,
    },
    #[error("object '{object}': {detail}")]
    BadObject { object: String, detail: String },
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionalLight {
    /// Direction the light travels (from the light toward the scene).
    pub direction: [f64; 3],
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lights {
    #[serde(default)]
    pub ambient: f64,
    #[serde(default)]
    pub directional: Vec<DirectionalLight>,
}

impl Default for Lights {
    fn default() -> Self {
        Lights { ambient: 1.0, directional: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub mesh: String,
    pub class: String,
    #[serde(default = "default_albedo")]
    pub albedo: [f64; 3],
    #[serde(default)]
    pub pose: PoseSpec,
    #[serde(default = "unit_scale")]
    pub scale: [f64; 3],
    #[serde(default)]
    pub grabbable: bool,
}

fn default_albedo() -> [f64; 3] {
    [0.8, 0.8, 0.8]
}

fn unit_scale() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_units() -> String {
    "m".into()
}

/// On-disk scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default = "default_units")]
    pub units: String,
    #[serde(default)]
    pub meshes: BTreeMap<String, MeshSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    /// Robot definition file, relative to the scene file.
    pub robot: String,
    /// Placement of the robot base in the world.
    #[serde(default)]
    pub robot_pose: PoseSpec,
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub lights: Lights,
    #[serde(default)]
    pub classes: BTreeMap<String, u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub name: String,
    pub instance_id: u16,
    pub class_name: String,
    pub class_id: u16,
    pub mesh_name: String,
    /// Mesh with the object's scale already baked in.
    pub mesh: Arc<TriMesh>,
    pub albedo: [f64; 3],
    pub pose: Pose,
    pub grabbable: bool,
}

impl ObjectInstance {
    pub fn world_aabb(&self, pose: &Pose) -> Aabb {
        world_aabb(&self.mesh, pose, Vec3::splat(1.0)).expect("loaded meshes are non-empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub units: String,
    pub objects: Vec<ObjectInstance>,
    pub robot: RobotDef,
    pub robot_pose: Pose,
    pub cameras: Vec<CameraDef>,
    pub lights: Lights,
    pub class_map: BTreeMap<String, u16>,
    /// Reference written into recordings (the path the scene was loaded from).
    pub source: String,
    pub file: SceneFile,
    /// Degenerate triangles dropped while loading meshes.
    pub dropped_triangles: usize,
}

/// One object's state within a snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectState {
    pub pose: Pose,
    pub aabb: Aabb,
}

/// Fully posed world at one instant. Entries are indexed like the scene's
/// objects, skeleton joints and cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSnapshot {
    /// Simulation tick this snapshot was taken at.
    pub frame_id: u64,
    /// Milliseconds since simulation start.
    pub timestamp_ms: u64,
    pub objects: Vec<ObjectState>,
    pub joints: Vec<Pose>,
    pub cameras: Vec<Pose>,
}

impl Scene {
    pub fn load(path: &Path) -> Result<Scene, SceneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SceneError::Io { path: path.display().to_string(), source })?;
        let file: SceneFile = serde_json::from_str(&text)
            .map_err(|e| SceneError::Schema { path: path.display().to_string(), detail: e.to_string() })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Scene::from_file(file, &base, &path.display().to_string())
    }

    pub fn from_file(file: SceneFile, base_dir: &Path, source: &str) -> Result<Scene, SceneError> {
        if file.units != "m" {
            return Err(SceneError::Units(file.units.clone()));
        }
        let ids: BTreeSet<u16> = file.classes.values().copied().collect();
        let dense: BTreeSet<u16> = (1..=file.classes.len() as u16).collect();
        if ids != dense {
            return Err(SceneError::ClassIds(format!("{:?}", file.classes)));
        }
        if file.objects.len() >= ROBOT_INSTANCE_BASE as usize {
            return Err(SceneError::TooManyObjects(file.objects.len()));
        }

        let mut meshes: BTreeMap<&str, TriMesh> = BTreeMap::new();
        let mut dropped_triangles = 0;
        for (name, spec) in &file.meshes {
            let (mesh, dropped) =
                spec.build(base_dir).map_err(|source| SceneError::Mesh { name: name.clone(), source })?;
            if dropped > 0 {
                log::warn!("mesh '{name}': dropped {dropped} degenerate triangles");
            }
            dropped_triangles += dropped;
            meshes.insert(name, mesh);
        }

        let mut seen = BTreeSet::new();
        let mut objects = Vec::with_capacity(file.objects.len());
        for (i, o) in file.objects.iter().enumerate() {
            if !valid_name(&o.name) {
                return Err(SceneError::BadName(o.name.clone()));
            }
            if !seen.insert(o.name.clone()) {
                return Err(SceneError::DuplicateName(o.name.clone()));
            }
            let base_mesh = meshes
                .get(o.mesh.as_str())
                .ok_or_else(|| SceneError::DanglingMesh { object: o.name.clone(), mesh: o.mesh.clone() })?;
            let class_id = *file
                .classes
                .get(&o.class)
                .ok_or_else(|| SceneError::UnknownClass { object: o.name.clone(), class: o.class.clone() })?;
            let bad = |detail: String| SceneError::BadObject { object: o.name.clone(), detail };
            let scale = Vec3::from(o.scale);
            if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0 && scale.is_finite()) {
                return Err(bad(format!("scale must be positive, got {:?}", o.scale)));
            }
            if o.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(bad(format!("albedo must be in [0,1], got {:?}", o.albedo)));
            }
            let pose = o.pose.resolve().map_err(bad)?;
            objects.push(ObjectInstance {
                name: o.name.clone(),
                instance_id: (i + 1) as u16,
                class_name: o.class.clone(),
                class_id,
                mesh_name: o.mesh.clone(),
                mesh: Arc::new(if scale == Vec3::splat(1.0) { base_mesh.clone() } else { base_mesh.scaled(scale) }),
                albedo: o.albedo,
                pose,
                grabbable: o.grabbable,
            });
        }

        let robot = RobotDef::load(&base_dir.join(&file.robot))?;
        let robot_pose = file
            .robot_pose
            .resolve()
            .map_err(|detail| SceneError::BadObject { object: "robot_pose".into(), detail })?;

        let mut cameras = Vec::new();
        for spec in &file.cameras {
            cameras.extend(spec.build()?);
        }
        if cameras.is_empty() {
            return Err(SceneError::NoCamera);
        }
        let mut cam_names = BTreeSet::new();
        for c in &cameras {
            if !valid_name(&c.name) {
                return Err(SceneError::BadName(c.name.clone()));
            }
            if !cam_names.insert(c.name.clone()) {
                return Err(SceneError::DuplicateName(c.name.clone()));
            }
            if let Some(s) = c.socket() {
                if !robot.skeleton.sockets.contains_key(s) {
                    return Err(CameraError::MissingSocket { camera: c.name.clone(), socket: s.to_string() }.into());
                }
            }
        }

        Ok(Scene {
            units: file.units.clone(),
            objects,
            robot,
            robot_pose,
            cameras,
            lights: file.lights.clone(),
            class_map: file.classes.clone(),
            source: source.to_string(),
            file,
            dropped_triangles,
        })
    }

    /// Writes the scene description back out as JSON.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.file).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn camera_index(&self, name: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.name == name)
    }

    pub fn class_name(&self, id: u16) -> Option<&str> {
        self.class_map.iter().find(|(_, &v)| v == id).map(|(k, _)| k.as_str())
    }

    /// Resolves every camera from world joint poses. `initial` gives the
    /// cameras' start-of-scene poses for channels an attachment does not follow.
    pub fn resolve_cameras(&self, joint_world: &[Pose], initial: Option<&[Pose]>) -> Result<Vec<Pose>, CameraError> {
        self.cameras
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let socket = c.socket().and_then(|s| self.robot.skeleton.socket_world_pose(joint_world, s).ok());
                resolve_camera_pose(c, socket.as_ref(), initial.map(|v| &v[i]))
            })
            .collect()
    }

    /// Snapshot of the scene as loaded: objects at their file poses, robot
    /// at rest with open hands.
    pub fn initial_snapshot(&self) -> SceneSnapshot {
        let joints = self.robot.skeleton.forward_kinematics_indexed(&self.robot_pose, &self.robot.rest_locals());
        let cameras = self.resolve_cameras(&joints, None).expect("camera sockets validated at load");
        SceneSnapshot {
            frame_id: 0,
            timestamp_ms: 0,
            objects: self.objects.iter().map(|o| ObjectState { pose: o.pose, aabb: o.world_aabb(&o.pose) }).collect(),
            joints,
            cameras,
        }
    }
}
