//! Phalange trigger spheres, contact detection, contact-limited finger
//! closing, the grasp/release state machine and post-release ballistics.

use crate::bvh::Bvh;
use crate::math::{Pose, Vec3};
use crate::mesh::Aabb;
use crate::robot::HandDef;
use crate::scene::{Scene, SceneSnapshot};
use crate::schema::Side;

/// Finger closing speed in extent units per second.
pub const CLOSE_RATE: f64 = 3.0;
/// Contact checks per tick while closing.
pub const SUBSTEPS: u32 = 8;
/// Minimum grip input to start a grasp.
pub const ATTACH_GRIP: f64 = 0.2;
/// Grip input below this counts toward release.
pub const HOLD_GRIP: f64 = 0.1;
/// Consecutive low-grip ticks before a release takes effect.
pub const RELEASE_DEBOUNCE_TICKS: u32 = 3;
pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSphere {
    pub side: Side,
    pub finger: usize,
    pub phalange: usize,
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Contact {
    pub side: Side,
    pub finger: String,
    pub phalange: usize,
    pub object: String,
    /// `radius - distance`, never negative.
    pub penetration: f64,
}

/// An object held rigidly by a hand.
#[derive(Debug, Clone, PartialEq)]
pub struct Grasp {
    pub object: String,
    /// Object pose in the wrist frame, captured at attach time.
    pub offset: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandState {
    pub side: Side,
    pub grip_input: f64,
    /// Closing extent per finger, indexed like `HandDef::fingers`.
    pub extents: Vec<f64>,
    pub grasp: Option<Grasp>,
    pub release_debounce: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraspDecision {
    None,
    Attach(String),
    Hold,
    Release,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("no world pose for phalange joint {0}")]
pub struct MissingJoint(pub usize);

/// One sphere per phalange, centered on the phalange joint.
pub fn update_triggers(hand: &HandDef, joint_world: &[Pose]) -> Result<Vec<TriggerSphere>, MissingJoint> {
    let mut out = Vec::with_capacity(hand.phalange_count());
    for (fi, finger) in hand.fingers.iter().enumerate() {
        for (pi, p) in finger.phalanges.iter().enumerate() {
            let w = joint_world.get(p.joint).ok_or(MissingJoint(p.joint))?;
            out.push(TriggerSphere { side: hand.side, finger: fi, phalange: pi, center: w.position, radius: p.radius });
        }
    }
    Ok(out)
}

/// Per-object BVHs (in object-local coordinates) for every grabbable object.
#[derive(Debug, Clone)]
pub struct ContactWorld {
    targets: Vec<(usize, Bvh)>,
}

impl ContactWorld {
    pub fn new(scene: &Scene) -> ContactWorld {
        let targets = scene
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.grabbable)
            .filter_map(|(i, o)| Bvh::from_mesh(&o.mesh, o.instance_id).map(|b| (i, b)))
            .collect();
        ContactWorld { targets }
    }

    /// Distance from `center` to the surface of object `idx` if within `radius`.
    fn sphere_hits(&self, bvh: &Bvh, pose: &Pose, center: Vec3, radius: f64) -> Option<f64> {
        let local = pose.inverse().transform_point(center);
        bvh.closest_point(local, radius).map(|q| q.distance)
    }

    /// A contact for every (trigger, grabbable object) pair whose
    /// sphere-to-surface distance is at most the radius.
    pub fn detect_contacts(
        &self,
        hand: &HandDef,
        triggers: &[TriggerSphere],
        scene: &Scene,
        snapshot: &SceneSnapshot,
    ) -> Vec<Contact> {
        let mut out = Vec::new();
        for t in triggers {
            for (oi, bvh) in &self.targets {
                let pose = &snapshot.objects[*oi].pose;
                if let Some(d) = self.sphere_hits(bvh, pose, t.center, t.radius) {
                    out.push(Contact {
                        side: t.side,
                        finger: hand.fingers[t.finger].name.clone(),
                        phalange: t.phalange,
                        object: scene.objects[*oi].name.clone(),
                        penetration: (t.radius - d).max(0.0),
                    });
                }
            }
        }
        out
    }

    /// True if any of the given spheres touches any grabbable object.
    pub fn any_contact(&self, spheres: &[(Vec3, f64)], snapshot: &SceneSnapshot) -> bool {
        spheres.iter().any(|&(c, r)| {
            self.targets.iter().any(|(oi, bvh)| self.sphere_hits(bvh, &snapshot.objects[*oi].pose, c, r).is_some())
        })
    }
}

impl HandState {
    pub fn new(side: Side, fingers: usize) -> HandState {
        HandState { side, grip_input: 0.0, extents: vec![0.0; fingers], grasp: None, release_debounce: 0 }
    }

    pub fn grasped_object(&self) -> Option<&str> {
        self.grasp.as_ref().map(|g| g.object.as_str())
    }

    /// Starts holding `object`, capturing its pose in the wrist frame.
    pub fn attach(&mut self, object: &str, wrist_world: &Pose, object_world: &Pose) {
        self.grasp = Some(Grasp { object: object.to_string(), offset: wrist_world.inverse().compose(object_world) });
        self.release_debounce = 0;
    }

    pub fn release(&mut self) -> Option<Grasp> {
        self.release_debounce = 0;
        self.grasp.take()
    }

    /// Advances every finger toward `grip` at [`CLOSE_RATE`], in
    /// [`SUBSTEPS`] equal substeps. `touching(finger, extent)` reports
    /// whether that finger's triggers contact an object at that extent; a
    /// closing finger stops at the first substep where it does. Opening is
    /// never blocked.
    pub fn step_fingers(&mut self, grip: f64, dt: f64, mut touching: impl FnMut(usize, f64) -> bool) {
        let grip = grip.clamp(0.0, 1.0);
        let max_delta = CLOSE_RATE * dt;
        for (fi, extent) in self.extents.iter_mut().enumerate() {
            let start = *extent;
            if grip < start {
                *extent = (start - max_delta).max(grip);
                continue;
            }
            if grip == start || touching(fi, start) {
                continue;
            }
            for s in 1..=SUBSTEPS {
                let candidate = (start + max_delta * s as f64 / SUBSTEPS as f64).min(grip);
                *extent = candidate;
                if candidate >= grip || touching(fi, candidate) {
                    break;
                }
            }
        }
    }

    /// Grasp state machine for one tick. Updates the release debounce
    /// counter; the caller applies Attach/Release.
    pub fn evaluate_grasp(&mut self, hand: &HandDef, contacts: &[Contact]) -> GraspDecision {
        if self.grasp.is_some() {
            if self.grip_input >= HOLD_GRIP {
                self.release_debounce = 0;
                return GraspDecision::Hold;
            }
            self.release_debounce += 1;
            if self.release_debounce >= RELEASE_DEBOUNCE_TICKS {
                return GraspDecision::Release;
            }
            return GraspDecision::Hold;
        }
        self.release_debounce = 0;
        if self.grip_input < ATTACH_GRIP {
            return GraspDecision::None;
        }
        match attach_candidate(hand, contacts) {
            Some(o) => GraspDecision::Attach(o),
            None => GraspDecision::None,
        }
    }

    /// Object pose that keeps the captured wrist-relative transform.
    pub fn apply_attachment(&self, wrist_world: &Pose) -> Option<Pose> {
        self.grasp.as_ref().map(|g| wrist_world.compose(&g.offset))
    }
}

/// Object touched by the thumb and at least one other finger. With several
/// candidates the one touched by the most fingers wins, then the smallest name.
pub fn attach_candidate(hand: &HandDef, contacts: &[Contact]) -> Option<String> {
    let mut per_object: std::collections::BTreeMap<&str, std::collections::BTreeSet<&str>> = Default::default();
    for c in contacts.iter().filter(|c| c.side == hand.side) {
        per_object.entry(c.object.as_str()).or_default().insert(c.finger.as_str());
    }
    per_object
        .into_iter()
        .filter(|(_, fingers)| fingers.contains("thumb") && fingers.len() >= 2)
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
        .map(|(o, _)| o.to_string())
}

/// Free fall of a released object from its release pose with an initial
/// velocity, until its box rests on the floor (z = 0) or on top of a support box.
#[derive(Debug, Clone, PartialEq)]
pub struct BallisticDrop {
    pub start: Pose,
    pub velocity: Vec3,
    /// Seconds after release at which the object comes to rest.
    pub landing_time: f64,
    pub rest: Pose,
}

impl BallisticDrop {
    pub fn new(start: Pose, start_aabb: &Aabb, velocity: Vec3, supports: &[Aabb]) -> BallisticDrop {
        let bottom = start_aabb.min.z;
        let fall_time = |h: f64| {
            let drop = (bottom - h).max(0.0);
            (velocity.z + (velocity.z * velocity.z + 2.0 * GRAVITY * drop).sqrt()) / GRAVITY
        };
        let floor = Aabb::new(
            Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            Vec3::new(f64::INFINITY, f64::INFINITY, 0.0),
        );
        let mut best: Option<(f64, f64)> = None;
        for s in supports.iter().chain(std::iter::once(&floor)) {
            let top = s.max.z;
            if top > bottom + 1e-9 {
                continue;
            }
            let t = fall_time(top);
            let shift = Vec3::new(velocity.x * t, velocity.y * t, 0.0);
            let moved = Aabb::new(start_aabb.min + shift, start_aabb.max + shift);
            if !moved.overlaps_xy(s) {
                continue;
            }
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, top));
            }
        }
        let (landing_time, top) = best.unwrap_or((fall_time(0.0), 0.0));
        let mut rest = start;
        rest.position.x += velocity.x * landing_time;
        rest.position.y += velocity.y * landing_time;
        rest.position.z += top - bottom;
        BallisticDrop { start, velocity, landing_time, rest }
    }

    pub fn pose_at(&self, t: f64) -> Pose {
        if t >= self.landing_time {
            return self.rest;
        }
        let t = t.max(0.0);
        let mut p = self.start;
        p.position += self.velocity * t;
        p.position.z -= 0.5 * GRAVITY * t * t;
        p
    }

    pub fn landed(&self, t: f64) -> bool {
        t >= self.landing_time
    }
}

/// Trajectory sampled at `hz` until rest (inclusive of the rest pose).
pub fn release_trajectory(drop: &BallisticDrop, hz: f64) -> Vec<Pose> {
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 / hz;
        out.push(drop.pose_at(t));
        if drop.landed(t) {
            return out;
        }
        k += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::mesh_triangles;
    use crate::math::Quat;
    use crate::mesh::TriMesh;
    use crate::robot::{FingerChain, Phalange};
    use rand::{Rng, SeedableRng};

    fn hand(fingers: &[&str]) -> HandDef {
        HandDef {
            side: Side::Right,
            wrist: 0,
            fingers: fingers
                .iter()
                .enumerate()
                .map(|(i, n)| FingerChain {
                    name: n.to_string(),
                    phalanges: (0..3)
                        .map(|k| Phalange {
                            joint: 1 + 3 * i + k,
                            open_local: Pose::IDENTITY,
                            closed_local: Pose::IDENTITY,
                            radius: 0.012,
                        })
                        .collect(),
                })
                .collect(),
            palm_socket: "palm".into(),
        }
    }

    fn contact(finger: &str, object: &str) -> Contact {
        Contact { side: Side::Right, finger: finger.into(), phalange: 0, object: object.into(), penetration: 0.001 }
    }

    const FIVE: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

    #[test]
    fn fifteen_triggers_for_five_fingers() {
        let h = hand(&FIVE);
        let world = vec![Pose::IDENTITY; 16];
        let t = update_triggers(&h, &world).unwrap();
        assert_eq!(t.len(), 15);
        assert!(t.iter().all(|s| s.center == Vec3::ZERO));
        let mut world = world;
        world[4] = Pose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let t = update_triggers(&h, &world).unwrap();
        assert_eq!(t[3].center, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(t[3].radius, 0.012);
        assert_eq!(update_triggers(&h, &world[..5]), Err(MissingJoint(5)));
    }

    #[test]
    fn sphere_near_cube_face() {
        let mesh = TriMesh::cuboid(Vec3::splat(0.1)).unwrap();
        let bvh = Bvh::from_mesh(&mesh, 1).unwrap();
        let cw = ContactWorld { targets: vec![(0, bvh)] };
        let snap = SceneSnapshot {
            frame_id: 0,
            timestamp_ms: 0,
            objects: vec![crate::scene::ObjectState { pose: Pose::IDENTITY, aabb: mesh.local_aabb() }],
            joints: vec![],
            cameras: vec![],
        };
        let near = Vec3::new(0.055, 0.0, 0.0);
        let d = cw.sphere_hits(&cw.targets[0].1, &Pose::IDENTITY, near, 0.01).unwrap();
        assert!((0.01 - d - 0.005).abs() < 1e-12);
        assert!(cw.any_contact(&[(near, 0.01)], &snap));
        assert!(!cw.any_contact(&[(Vec3::new(0.07, 0.0, 0.0), 0.01)], &snap));
    }

    #[test]
    fn contacts_match_brute_force_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mesh = TriMesh::uv_sphere(0.05, 16, 8).unwrap();
        let bvh = Bvh::from_mesh(&mesh, 1).unwrap();
        let cw = ContactWorld { targets: vec![(0, bvh)] };
        for _ in 0..2000 {
            let pose = Pose::new(
                Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
                Quat::from_axis_angle(Vec3::new(rng.random(), rng.random(), 1.0), rng.random_range(-3.0..3.0)),
            );
            let c = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let r = rng.random_range(0.005..0.05);
            let got = cw.sphere_hits(&cw.targets[0].1, &pose, c, r).is_some();
            // oracle: every triangle moved into the world, closest point exhaustively
            let world_tris = mesh_triangles(&mesh.transformed(&pose), 1);
            let min_d = world_tris.iter().map(|t| (t.closest_point(c) - c).norm()).fold(f64::INFINITY, f64::min);
            if (min_d - r).abs() > 1e-12 {
                assert_eq!(got, min_d <= r, "d={min_d} r={r}");
            }
        }
    }

    #[test]
    fn fingers_rate_limited_without_contacts() {
        let mut h = HandState::new(Side::Right, 5);
        h.step_fingers(1.0, 1.0 / 30.0, |_, _| false);
        assert!(h.extents.iter().all(|&e| (e - 0.1).abs() < 1e-15));
    }

    #[test]
    fn finger_stops_at_first_contacting_substep() {
        let mut h = HandState::new(Side::Right, 1);
        h.extents[0] = 0.4;
        // surface reached between substeps 3 and 4
        h.step_fingers(1.0, 1.0 / 30.0, |_, e| e >= 0.44);
        assert!((h.extents[0] - 0.45).abs() < 1e-12, "{}", h.extents[0]);
        assert!(h.extents[0] <= 0.5);
        // already touching: no further closing
        h.step_fingers(1.0, 1.0 / 30.0, |_, e| e >= 0.44);
        assert!((h.extents[0] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn opening_is_never_blocked() {
        let mut h = HandState::new(Side::Right, 1);
        h.extents[0] = 0.5;
        h.step_fingers(0.0, 1.0 / 30.0, |_, _| true);
        assert!((h.extents[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn closing_never_passes_a_contact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let surface: f64 = rng.random_range(0.0..1.0);
            let mut h = HandState::new(Side::Right, 1);
            for _ in 0..40 {
                let before = h.extents[0];
                let mut probes = Vec::new();
                h.step_fingers(1.0, 1.0 / 30.0, |_, e| {
                    probes.push(e);
                    e >= surface
                });
                // every probe before the last was contact-free, and we stopped at the first contact
                let after = h.extents[0];
                if let Some(first) = probes.iter().position(|&e| e >= surface) {
                    if probes[first] == before {
                        assert_eq!(after, before);
                    } else {
                        assert_eq!(after, probes[first]);
                    }
                }
                assert!(after <= surface + CLOSE_RATE / 30.0 / SUBSTEPS as f64 + 1e-12);
            }
        }
    }

    #[test]
    fn attach_needs_thumb_and_another_finger() {
        let h = hand(&FIVE);
        let mut s = HandState::new(Side::Right, 5);
        s.grip_input = 0.6;
        let d = s.evaluate_grasp(&h, &[contact("thumb", "mug"), contact("index", "mug")]);
        assert_eq!(d, GraspDecision::Attach("mug".into()));
        s.grip_input = 0.9;
        assert_eq!(s.evaluate_grasp(&h, &[contact("index", "mug")]), GraspDecision::None);
        assert_eq!(s.evaluate_grasp(&h, &[contact("thumb", "mug"), contact("thumb", "mug")]), GraspDecision::None);
        s.grip_input = 0.15;
        let d = s.evaluate_grasp(&h, &[contact("thumb", "mug"), contact("index", "mug")]);
        assert_eq!(d, GraspDecision::None);
    }

    #[test]
    fn thumbless_contact_sets_never_attach() {
        let h = hand(&FIVE);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let n = rng.random_range(0..12);
            let cs: Vec<Contact> = (0..n)
                .map(|_| contact(FIVE[rng.random_range(1..5)], ["a", "b", "c"][rng.random_range(0..3)]))
                .collect();
            let mut s = HandState::new(Side::Right, 5);
            s.grip_input = rng.random_range(0.0..=1.0);
            assert_eq!(s.evaluate_grasp(&h, &cs), GraspDecision::None);
        }
    }

    #[test]
    fn release_debounce_is_three_ticks() {
        let h = hand(&FIVE);
        let mut s = HandState::new(Side::Right, 5);
        s.attach("mug", &Pose::IDENTITY, &Pose::IDENTITY);
        s.grip_input = 0.05;
        assert_eq!(s.evaluate_grasp(&h, &[]), GraspDecision::Hold);
        assert_eq!(s.evaluate_grasp(&h, &[]), GraspDecision::Hold);
        assert_eq!(s.evaluate_grasp(&h, &[]), GraspDecision::Release);

        // a grip spike resets the counter
        let mut s = HandState::new(Side::Right, 5);
        s.attach("mug", &Pose::IDENTITY, &Pose::IDENTITY);
        s.grip_input = 0.05;
        s.evaluate_grasp(&h, &[]);
        s.evaluate_grasp(&h, &[]);
        s.grip_input = 0.5;
        assert_eq!(s.evaluate_grasp(&h, &[]), GraspDecision::Hold);
        s.grip_input = 0.05;
        assert_eq!(s.evaluate_grasp(&h, &[]), GraspDecision::Hold);
        assert_eq!(s.evaluate_grasp(&h, &[]), GraspDecision::Hold);
        assert_eq!(s.evaluate_grasp(&h, &[]), GraspDecision::Release);
    }

    #[test]
    fn attachment_is_rigid() {
        let mut s = HandState::new(Side::Right, 5);
        let wrist = Pose::new(Vec3::new(0.3, -0.2, 1.0), Quat::rot_y(0.5));
        let obj = Pose::new(Vec3::new(0.35, -0.2, 0.9), Quat::rot_z(0.2));
        s.attach("box", &wrist, &obj);
        let offset = s.grasp.as_ref().unwrap().offset;
        assert_eq!(offset, wrist.inverse().compose(&obj));

        let moved = Pose::new(wrist.position + Vec3::new(0.1, 0.0, 0.0), wrist.rotation);
        let p = s.apply_attachment(&moved).unwrap();
        assert!(p.position.max_abs_diff(obj.position + Vec3::new(0.1, 0.0, 0.0)) < 1e-12);

        let turned = Pose::new(wrist.position, Quat::rot_z(std::f64::consts::FRAC_PI_2) * wrist.rotation);
        let p = s.apply_attachment(&turned).unwrap();
        assert!(turned.inverse().compose(&p).max_abs_diff(&offset) < 1e-9);
        assert_eq!(s.grasp.as_ref().unwrap().offset, offset);
    }

    #[test]
    fn drop_from_half_a_meter() {
        let aabb = Aabb::new(Vec3::new(-0.05, -0.05, 0.5), Vec3::new(0.05, 0.05, 0.6));
        let start = Pose::from_translation(Vec3::new(0.0, 0.0, 0.55));
        let d = BallisticDrop::new(start, &aabb, Vec3::ZERO, &[]);
        assert!((d.landing_time - (2.0 * 0.5 / 9.81f64).sqrt()).abs() < 1e-12);
        assert!((d.landing_time - 0.319).abs() < 1e-3);
        assert!((d.rest.position.z - 0.05).abs() < 1e-12);

        let thrown = BallisticDrop::new(start, &aabb, Vec3::new(1.0, 0.0, 0.0), &[]);
        assert!((thrown.rest.position.x - 0.319).abs() < 1e-3);

        let grounded = Aabb::new(Vec3::new(-0.05, -0.05, 0.0), Vec3::new(0.05, 0.05, 0.1));
        let d = BallisticDrop::new(Pose::from_translation(Vec3::new(0.0, 0.0, 0.05)), &grounded, Vec3::ZERO, &[]);
        assert_eq!(d.landing_time, 0.0);
        assert_eq!(release_trajectory(&d, 30.0).len(), 1);
    }

    #[test]
    fn drop_onto_table() {
        let table = Aabb::new(Vec3::new(-1.0, -1.0, 0.0), Vec3::new(1.0, 1.0, 0.75));
        let aabb = Aabb::new(Vec3::new(-0.05, -0.05, 1.0), Vec3::new(0.05, 0.05, 1.1));
        let d = BallisticDrop::new(Pose::from_translation(Vec3::new(0.0, 0.0, 1.05)), &aabb, Vec3::ZERO, &[table]);
        assert!((d.rest.position.z - 0.8).abs() < 1e-12);
        // missing the table lands on the floor
        let off = Aabb::new(Vec3::new(2.0, 2.0, 1.0), Vec3::new(2.1, 2.1, 1.1));
        let d = BallisticDrop::new(Pose::from_translation(Vec3::new(2.05, 2.05, 1.05)), &off, Vec3::ZERO, &[table]);
        assert!((d.rest.position.z - 0.05).abs() < 1e-12);
    }
}
