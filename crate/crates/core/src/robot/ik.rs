//! Analytic two-bone (shoulder/elbow/wrist) arm solver.
//!
//! Bone convention: each arm bone points along its joint's local +X, and the
//! elbow bends about its local Z. With the elbow's local rotation set to
//! `rot_z(elbow_angle - π)` the wrist lands on the (clamped) target.

use std::f64::consts::PI;

use crate::math::{Quat, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmSolution {
    /// World rotation of the shoulder joint.
    pub shoulder_rotation: Quat,
    /// Interior angle at the elbow: π is fully straight.
    pub elbow_angle: f64,
    /// Target after reach clamping; the wrist ends up here.
    pub reached: Vec3,
}

impl ArmSolution {
    /// Elbow local rotation for the bone convention above.
    pub fn elbow_rotation(&self) -> Quat {
        Quat::rot_z(self.elbow_angle - PI)
    }
}

pub fn two_bone_ik(shoulder: Vec3, upper_len: f64, fore_len: f64, target: Vec3, pole_hint: Vec3) -> ArmSolution {
    debug_assert!(upper_len > 0.0 && fore_len > 0.0);
    let to_target = target - shoulder;
    let dist = to_target.norm();
    let pole_dir = pole_hint - shoulder;

    let dir = if dist > 1e-12 {
        to_target / dist
    } else if pole_dir.norm() > 1e-12 {
        pole_dir.normalized()
    } else {
        Vec3::X
    };
    let max_reach = upper_len + fore_len;
    let min_reach = (upper_len - fore_len).abs();
    let d = dist.clamp(min_reach, max_reach);
    let reached = shoulder + dir * d;

    // bend plane: component of the pole direction perpendicular to the reach line
    let mut bend = pole_dir - dir * pole_dir.dot(dir);
    if bend.norm() < 1e-9 {
        bend = dir.any_perpendicular();
    }
    let bend = bend.normalized();

    let cos_elbow =
        ((upper_len * upper_len + fore_len * fore_len - d * d) / (2.0 * upper_len * fore_len)).clamp(-1.0, 1.0);
    let elbow_angle = cos_elbow.acos();
    let cos_shoulder = if d > 0.0 {
        ((upper_len * upper_len + d * d - fore_len * fore_len) / (2.0 * upper_len * d)).clamp(-1.0, 1.0)
    } else {
        1.0
    };
    let shoulder_angle = cos_shoulder.acos();
    let (s, c) = shoulder_angle.sin_cos();
    let x_axis = dir * c + bend * s;
    let y_axis = dir * -s + bend * c;
    let z_axis = x_axis.cross(y_axis);
    ArmSolution { shoulder_rotation: Quat::from_axes(x_axis, y_axis, z_axis), elbow_angle, reached }
}

/// Wrist position implied by a solution; used to check the solver.
pub fn wrist_position(shoulder: Vec3, upper_len: f64, fore_len: f64, sol: &ArmSolution) -> Vec3 {
    let elbow = shoulder + sol.shoulder_rotation.rotate(Vec3::X * upper_len);
    elbow + (sol.shoulder_rotation * sol.elbow_rotation()).rotate(Vec3::X * fore_len)
}
