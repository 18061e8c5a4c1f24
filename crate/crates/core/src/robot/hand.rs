use crate::math::Pose;
use crate::schema::Side;

#[derive(Debug, Clone, PartialEq)]
pub struct Phalange {
    pub joint: usize,
    pub open_local: Pose,
    pub closed_local: Pose,
    /// Trigger sphere radius in meters.
    pub radius: f64,
}

/// Phalanges ordered proximal to distal.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerChain {
    pub name: String,
    pub phalanges: Vec<Phalange>,
}

impl FingerChain {
    pub fn is_thumb(&self) -> bool {
        self.name == "thumb"
    }

    /// Local pose of every phalange at closing `extent` (0 open, 1 closed).
    pub fn interpolate(&self, extent: f64) -> Vec<Pose> {
        let e = extent.clamp(0.0, 1.0);
        self.phalanges
            .iter()
            .map(|p| {
                if e == 0.0 {
                    p.open_local
                } else if e == 1.0 {
                    p.closed_local
                } else {
                    Pose::new(
                        p.open_local.position.lerp(p.closed_local.position, e),
                        p.open_local.rotation.slerp(p.closed_local.rotation, e),
                    )
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandDef {
    pub side: Side,
    pub wrist: usize,
    pub fingers: Vec<FingerChain>,
    pub palm_socket: String,
}

impl HandDef {
    pub fn finger_index(&self, name: &str) -> Option<usize> {
        self.fingers.iter().position(|f| f.name == name)
    }

    pub fn phalange_count(&self) -> usize {
        self.fingers.iter().map(|f| f.phalanges.len()).sum()
    }
}

/// Writes the interpolated phalange poses of `finger` into a full local-pose vector.
pub fn apply_finger(locals: &mut [Pose], finger: &FingerChain, extent: f64) {
    for (p, pose) in finger.phalanges.iter().zip(finger.interpolate(extent)) {
        locals[p.joint] = pose;
    }
}
