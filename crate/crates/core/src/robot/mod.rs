//! Robot definition: skeleton, sockets, arms and hands.

pub mod hand;
pub mod ik;
pub mod skeleton;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Pose, Vec3};
use crate::mesh::MeshError;
use crate::schema::{valid_name, MeshSpec, PoseSpec, Side};

pub use hand::{FingerChain, HandDef, Phalange};
pub use ik::{two_bone_ik, ArmSolution};
pub use skeleton::{FkResult, Joint, JointPoseMap, RobotLink, Skeleton, Socket};

#[derive(Debug, Error)]
pub enum RobotError {
    #[error("failed to read robot file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed robot file {path}: {detail}")]
    Schema { path: String, detail: String },
    #[error("duplicate joint name '{0}'")]
    DuplicateJoint(String),
    #[error("invalid joint name '{0}'")]
    BadName(String),
    #[error("skeleton must have exactly one root, found {0}")]
    RootCount(usize),
    #[error("joint hierarchy has a cycle through '{0}'")]
    Cycle(String),
    #[error("unknown joint '{0}'")]
    UnknownJoint(String),
    #[error("unknown socket '{0}'")]
    UnknownSocket(String),
    #[error("invalid pose for {what}: {detail}")]
    BadPose { what: String, detail: String },
    #[error("arm '{side}': {detail}")]
    BadArm { side: Side, detail: String },
    #[error("hand '{side}': {detail}")]
    BadHand { side: Side, detail: String },
    #[error("display mesh on joint '{joint}': {source}")]
    Mesh {
        joint: String,
        #[source]
        source: MeshError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub bind: PoseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SocketSpec {
    pub joint: String,
    #[serde(default)]
    pub offset: PoseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub side: Side,
    pub shoulder: String,
    pub elbow: String,
    pub wrist: String,
    /// Elbow pole direction in the robot base frame; defaults to body-forward (+X).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pole: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhalangeSpec {
    pub joint: String,
    /// Defaults to the joint's bind pose.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open: Option<PoseSpec>,
    pub closed: PoseSpec,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerSpec {
    pub name: String,
    pub phalanges: Vec<PhalangeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandSpec {
    pub side: Side,
    pub wrist: String,
    pub palm_socket: String,
    pub fingers: Vec<FingerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub joint: String,
    pub mesh: MeshSpec,
    #[serde(default)]
    pub offset: PoseSpec,
}

/// On-disk robot definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotFile {
    pub name: String,
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub sockets: BTreeMap<String, SocketSpec>,
    #[serde(default)]
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub hands: Vec<HandSpec>,
    #[serde(default)]
    pub meshes: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmDef {
    pub side: Side,
    pub shoulder: usize,
    pub elbow: usize,
    pub wrist: usize,
    pub upper_len: f64,
    pub fore_len: f64,
    /// Pole direction in the robot base frame.
    pub pole: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotDef {
    pub name: String,
    pub skeleton: Skeleton,
    pub arms: Vec<ArmDef>,
    pub hands: Vec<HandDef>,
    pub file: RobotFile,
}

fn pose(spec: &PoseSpec, what: impl Into<String>) -> Result<Pose, RobotError> {
    spec.resolve().map_err(|detail| RobotError::BadPose { what: what.into(), detail })
}

impl RobotDef {
    pub fn load(path: &Path) -> Result<RobotDef, RobotError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| RobotError::Io { path: path.display().to_string(), source })?;
        let file: RobotFile = serde_json::from_str(&text)
            .map_err(|e| RobotError::Schema { path: path.display().to_string(), detail: e.to_string() })?;
        RobotDef::from_file(file, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_file(file: RobotFile, base_dir: &Path) -> Result<RobotDef, RobotError> {
        let mut defs = Vec::with_capacity(file.joints.len());
        for j in &file.joints {
            if !valid_name(&j.name) {
                return Err(RobotError::BadName(j.name.clone()));
            }
            defs.push((j.name.clone(), j.parent.clone(), pose(&j.bind, format!("joint {}", j.name))?));
        }
        let mut skeleton = Skeleton::new(defs)?;
        for (name, s) in &file.sockets {
            if !valid_name(name) {
                return Err(RobotError::BadName(name.clone()));
            }
            skeleton.add_socket(name, &s.joint, pose(&s.offset, format!("socket {name}"))?)?;
        }
        for l in &file.meshes {
            let joint = skeleton.joint_index(&l.joint)?;
            let (mesh, _) =
                l.mesh.build(base_dir).map_err(|source| RobotError::Mesh { joint: l.joint.clone(), source })?;
            let offset = pose(&l.offset, format!("mesh on {}", l.joint))?;
            skeleton.links.push(RobotLink { joint, mesh: Arc::new(mesh), offset });
        }

        let mut arms = Vec::new();
        for a in &file.arms {
            if arms.iter().any(|x: &ArmDef| x.side == a.side) {
                return Err(RobotError::BadArm { side: a.side, detail: "duplicate side".into() });
            }
            let bad = |detail: String| RobotError::BadArm { side: a.side, detail };
            let shoulder = skeleton.joint_index(&a.shoulder)?;
            let elbow = skeleton.joint_index(&a.elbow)?;
            let wrist = skeleton.joint_index(&a.wrist)?;
            let joints = skeleton.joints();
            if joints[elbow].parent != Some(shoulder) || joints[wrist].parent != Some(elbow) {
                return Err(bad("expected shoulder -> elbow -> wrist parent chain".into()));
            }
            let bone = |j: usize| {
                let t = joints[j].bind_local.position;
                (t.x > 0.0 && t.y.abs() < 1e-9 && t.z.abs() < 1e-9).then_some(t.x)
            };
            let upper_len =
                bone(elbow).ok_or_else(|| bad("elbow bind offset must lie on the shoulder's +X axis".into()))?;
            let fore_len =
                bone(wrist).ok_or_else(|| bad("wrist bind offset must lie on the elbow's +X axis".into()))?;
            let pole = Vec3::from(a.pole.unwrap_or([1.0, 0.0, 0.0]));
            if !(pole.is_finite() && pole.norm() > 0.0) {
                return Err(bad("pole must be a non-zero vector".into()));
            }
            arms.push(ArmDef { side: a.side, shoulder, elbow, wrist, upper_len, fore_len, pole: pole.normalized() });
        }

        let mut hands = Vec::new();
        for h in &file.hands {
            let bad = |detail: String| RobotError::BadHand { side: h.side, detail };
            if hands.iter().any(|x: &HandDef| x.side == h.side) {
                return Err(bad("duplicate side".into()));
            }
            let wrist = skeleton.joint_index(&h.wrist)?;
            if !skeleton.sockets.contains_key(&h.palm_socket) {
                return Err(RobotError::UnknownSocket(h.palm_socket.clone()));
            }
            let mut fingers: Vec<FingerChain> = Vec::new();
            for f in &h.fingers {
                if fingers.iter().any(|x| x.name == f.name) {
                    return Err(bad(format!("duplicate finger '{}'", f.name)));
                }
                if f.phalanges.is_empty() {
                    return Err(bad(format!("finger '{}' has no phalanges", f.name)));
                }
                let mut phalanges = Vec::new();
                let mut expected_parent = None;
                for p in &f.phalanges {
                    let joint = skeleton.joint_index(&p.joint)?;
                    let parent = skeleton.joints()[joint].parent;
                    if let Some(ep) = expected_parent {
                        if parent != Some(ep) {
                            return Err(bad(format!("phalange '{}' is not a child of the previous phalange", p.joint)));
                        }
                    } else if !skeleton.subtree(wrist).contains(&joint) {
                        return Err(bad(format!("phalange '{}' is not under the wrist", p.joint)));
                    }
                    expected_parent = Some(joint);
                    if !(p.radius > 0.0 && p.radius.is_finite()) {
                        return Err(bad(format!("phalange '{}' needs a positive trigger radius", p.joint)));
                    }
                    let open_local = match &p.open {
                        Some(o) => pose(o, format!("open pose of {}", p.joint))?,
                        None => skeleton.joints()[joint].bind_local,
                    };
                    let closed_local = pose(&p.closed, format!("closed pose of {}", p.joint))?;
                    phalanges.push(Phalange { joint, open_local, closed_local, radius: p.radius });
                }
                fingers.push(FingerChain { name: f.name.clone(), phalanges });
            }
            if !fingers.iter().any(FingerChain::is_thumb) {
                return Err(bad("no thumb".into()));
            }
            hands.push(HandDef { side: h.side, wrist, fingers, palm_socket: h.palm_socket.clone() });
        }

        Ok(RobotDef { name: file.name.clone(), skeleton, arms, hands, file })
    }

    pub fn arm(&self, side: Side) -> Option<&ArmDef> {
        self.arms.iter().find(|a| a.side == side)
    }

    pub fn hand(&self, side: Side) -> Option<&HandDef> {
        self.hands.iter().find(|h| h.side == side)
    }

    /// Poses one arm so its wrist reaches `goal` (world frame): shoulder and
    /// elbow from the two-bone solver, wrist rotation matching `goal`.
    /// `locals` are updated in place; the solution is returned.
    pub fn solve_arm(&self, locals: &mut [Pose], base: &Pose, side: Side, goal: &Pose) -> Option<ArmSolution> {
        let arm = self.arm(side)?;
        let world = self.skeleton.forward_kinematics_indexed(base, locals);
        let parent = match self.skeleton.joints()[arm.shoulder].parent {
            Some(p) => world[p],
            None => *base,
        };
        let shoulder = world[arm.shoulder].position;
        let pole = shoulder + base.rotation.rotate(arm.pole);
        let sol = two_bone_ik(shoulder, arm.upper_len, arm.fore_len, goal.position, pole);
        locals[arm.shoulder].rotation = (parent.rotation.conjugate() * sol.shoulder_rotation).normalized();
        locals[arm.elbow].rotation = sol.elbow_rotation();
        let elbow_world = sol.shoulder_rotation * sol.elbow_rotation();
        locals[arm.wrist].rotation = (elbow_world.conjugate() * goal.rotation).normalized();
        Some(sol)
    }

    /// Local poses with every finger opened.
    pub fn rest_locals(&self) -> Vec<Pose> {
        let mut locals = self.skeleton.bind_locals();
        for h in &self.hands {
            for f in &h.fingers {
                hand::apply_finger(&mut locals, f, 0.0);
            }
        }
        locals
    }
}
