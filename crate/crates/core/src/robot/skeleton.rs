use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::math::Pose;
use crate::mesh::TriMesh;

use super::RobotError;

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest pose relative to the parent joint (or to the robot base for the root).
    pub bind_local: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Socket {
    pub joint: usize,
    pub offset: Pose,
}

/// Rigid display mesh carried by a joint.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotLink {
    pub joint: usize,
    pub mesh: Arc<TriMesh>,
    pub offset: Pose,
}

/// Per-joint local pose overrides; absent joints keep their bind pose.
pub type JointPoseMap = BTreeMap<String, Pose>;

/// Joint hierarchy in topological order (parents precede children).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    index: HashMap<String, usize>,
    pub sockets: BTreeMap<String, Socket>,
    pub links: Vec<RobotLink>,
}

impl Skeleton {
    /// Builds a skeleton from `(name, parent name, bind pose)` triples in any
    /// order. Joints are re-sorted so that parents precede children.
    pub fn new(defs: Vec<(String, Option<String>, Pose)>) -> Result<Skeleton, RobotError> {
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        for (i, (name, _, _)) in defs.iter().enumerate() {
            if by_name.insert(name.as_str(), i).is_some() {
                return Err(RobotError::DuplicateJoint(name.clone()));
            }
        }
        let roots: Vec<&str> = defs.iter().filter(|d| d.1.is_none()).map(|d| d.0.as_str()).collect();
        if roots.len() != 1 {
            return Err(RobotError::RootCount(roots.len()));
        }
        for (name, parent, _) in &defs {
            if let Some(p) = parent {
                if !by_name.contains_key(p.as_str()) {
                    return Err(RobotError::UnknownJoint(format!("{p} (parent of {name})")));
                }
            }
        }
        // Kahn-style ordering that keeps the file order among siblings.
        let mut order: Vec<usize> = Vec::with_capacity(defs.len());
        let mut placed = vec![false; defs.len()];
        let mut progress = true;
        while order.len() < defs.len() && progress {
            progress = false;
            for (i, (_, parent, _)) in defs.iter().enumerate() {
                if placed[i] {
                    continue;
                }
                let ready = parent.as_ref().is_none_or(|p| placed[by_name[p.as_str()]]);
                if ready {
                    placed[i] = true;
                    order.push(i);
                    progress = true;
                }
            }
        }
        if order.len() < defs.len() {
            let stuck = defs.iter().enumerate().find(|(i, _)| !placed[*i]).map(|(_, d)| d.0.clone());
            return Err(RobotError::Cycle(stuck.unwrap_or_default()));
        }
        let index: HashMap<String, usize> =
            order.iter().enumerate().map(|(new, &old)| (defs[old].0.clone(), new)).collect();
        let joints = order
            .iter()
            .map(|&old| {
                let (name, parent, bind) = &defs[old];
                Joint { name: name.clone(), parent: parent.as_ref().map(|p| index[p]), bind_local: *bind }
            })
            .collect();
        Ok(Skeleton { joints, index, sockets: BTreeMap::new(), links: Vec::new() })
    }

    pub fn add_socket(&mut self, name: &str, joint: &str, offset: Pose) -> Result<(), RobotError> {
        let joint = self.joint_index(joint)?;
        self.sockets.insert(name.to_string(), Socket { joint, offset });
        Ok(())
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn joint_index(&self, name: &str) -> Result<usize, RobotError> {
        self.index.get(name).copied().ok_or_else(|| RobotError::UnknownJoint(name.to_string()))
    }

    pub fn joint_names(&self) -> impl Iterator<Item = &str> {
        self.joints.iter().map(|j| j.name.as_str())
    }

    pub fn bind_locals(&self) -> Vec<Pose> {
        self.joints.iter().map(|j| j.bind_local).collect()
    }

    /// World poses from a full vector of local poses (indexed like `joints()`).
    pub fn forward_kinematics_indexed(&self, root_pose: &Pose, locals: &[Pose]) -> Vec<Pose> {
        let mut world: Vec<Pose> = Vec::with_capacity(self.joints.len());
        for (j, local) in self.joints.iter().zip(locals) {
            let parent = match j.parent {
                Some(p) => world[p],
                None => *root_pose,
            };
            world.push(parent.compose(local));
        }
        world
    }

    /// World pose of every joint: `world(j) = world(parent(j)) ∘ local(j)`.
    pub fn forward_kinematics(&self, root_pose: &Pose, locals: &JointPoseMap) -> Result<FkResult, RobotError> {
        let mut full = self.bind_locals();
        for (name, pose) in locals {
            full[self.joint_index(name)?] = *pose;
        }
        Ok(FkResult { world: self.forward_kinematics_indexed(root_pose, &full) })
    }

    pub fn socket_world_pose(&self, joint_world: &[Pose], socket: &str) -> Result<Pose, RobotError> {
        let s = self.sockets.get(socket).ok_or_else(|| RobotError::UnknownSocket(socket.to_string()))?;
        Ok(joint_world[s.joint].compose(&s.offset))
    }

    /// Names of the joints in the subtree rooted at `joint` (inclusive).
    pub fn subtree(&self, joint: usize) -> Vec<usize> {
        let mut inside = vec![false; self.joints.len()];
        inside[joint] = true;
        for (i, j) in self.joints.iter().enumerate().skip(joint + 1) {
            if j.parent.is_some_and(|p| inside[p]) {
                inside[i] = true;
            }
        }
        (0..self.joints.len()).filter(|&i| inside[i]).collect()
    }
}

/// World joint poses indexed like [`Skeleton::joints`].
#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub world: Vec<Pose>,
}

impl FkResult {
    pub fn get(&self, skel: &Skeleton, name: &str) -> Result<Pose, RobotError> {
        Ok(self.world[skel.joint_index(name)?])
    }

    pub fn to_map(&self, skel: &Skeleton) -> BTreeMap<String, Pose> {
        skel.joints().iter().zip(&self.world).map(|(j, p)| (j.name.clone(), *p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Quat, Vec3};
    use rand::{Rng, SeedableRng};

    fn chain(n: usize) -> Skeleton {
        let defs = (0..n)
            .map(|i| {
                let parent = (i > 0).then(|| format!("j{}", i - 1));
                (format!("j{i}"), parent, Pose::IDENTITY)
            })
            .collect();
        Skeleton::new(defs).unwrap()
    }

    /// Independent recursive evaluation: walk up to the root each time.
    fn recursive_world(defs: &[(String, Option<String>, Pose)], root: &Pose, name: &str) -> Pose {
        let (_, parent, local) = defs.iter().find(|d| d.0 == name).unwrap();
        let parent_world = match parent {
            Some(p) => recursive_world(defs, root, p),
            None => *root,
        };
        let r = parent_world.rotation;
        Pose::new(parent_world.position + r.rotate(local.position), (r * local.rotation).normalized())
    }

    #[test]
    fn identity_chain_at_origin() {
        let s = chain(2);
        let fk = s.forward_kinematics(&Pose::IDENTITY, &JointPoseMap::new()).unwrap();
        assert!(fk.world.iter().all(|p| *p == Pose::IDENTITY));
    }

    #[test]
    fn child_translation_under_moved_root() {
        let s = chain(2);
        let mut locals = JointPoseMap::new();
        locals.insert("j1".into(), Pose::from_translation(Vec3::new(0.0, 0.0, 0.3)));
        let root = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let fk = s.forward_kinematics(&root, &locals).unwrap();
        assert_eq!(fk.get(&s, "j1").unwrap().position, Vec3::new(1.0, 0.0, 0.3));
    }

    #[test]
    fn unknown_joint_in_locals() {
        let s = chain(2);
        let mut locals = JointPoseMap::new();
        locals.insert("nope".into(), Pose::IDENTITY);
        let e = s.forward_kinematics(&Pose::IDENTITY, &locals).unwrap_err();
        assert!(e.to_string().contains("nope"));
    }

    #[test]
    fn structural_errors() {
        let p = Pose::IDENTITY;
        let two_roots = vec![("a".into(), None, p), ("b".into(), None, p)];
        assert!(matches!(Skeleton::new(two_roots), Err(RobotError::RootCount(2))));
        let cycle = vec![("r".into(), None, p), ("a".into(), Some("b".into()), p), ("b".into(), Some("a".into()), p)];
        assert!(matches!(Skeleton::new(cycle), Err(RobotError::Cycle(_))));
        let dup = vec![("r".into(), None, p), ("r".into(), Some("r".into()), p)];
        assert!(matches!(Skeleton::new(dup), Err(RobotError::DuplicateJoint(_))));
    }

    #[test]
    fn out_of_order_definitions_are_sorted() {
        let p = Pose::from_translation(Vec3::X);
        let s = Skeleton::new(vec![
            ("c".into(), Some("b".into()), p),
            ("b".into(), Some("a".into()), p),
            ("a".into(), None, p),
        ])
        .unwrap();
        assert_eq!(s.joint_names().collect::<Vec<_>>(), ["a", "b", "c"]);
        let fk = s.forward_kinematics(&Pose::IDENTITY, &JointPoseMap::new()).unwrap();
        assert_eq!(fk.get(&s, "c").unwrap().position, Vec3::new(3.0, 0.0, 0.0));
    }

    #[test]
    fn sockets() {
        let mut s = chain(2);
        s.add_socket("root_sock", "j0", Pose::IDENTITY).unwrap();
        s.add_socket("up", "j1", Pose::from_translation(Vec3::new(0.0, 0.0, 0.1))).unwrap();
        let p = Pose::new(Vec3::new(1.0, 2.0, 3.0), Quat::rot_y(0.4));
        let fk = s.forward_kinematics(&p, &JointPoseMap::new()).unwrap();
        assert_eq!(s.socket_world_pose(&fk.world, "root_sock").unwrap(), p);
        let fk0 = s.forward_kinematics(&Pose::IDENTITY, &JointPoseMap::new()).unwrap();
        assert_eq!(s.socket_world_pose(&fk0.world, "up").unwrap().position, Vec3::new(0.0, 0.0, 0.1));
        assert!(matches!(s.socket_world_pose(&fk.world, "x"), Err(RobotError::UnknownSocket(_))));

        // rotated joint vs manual composition
        let mut locals = JointPoseMap::new();
        let rot = Pose::new(Vec3::new(0.2, 0.0, 0.0), Quat::rot_z(0.9));
        locals.insert("j1".into(), rot);
        let fk = s.forward_kinematics(&Pose::IDENTITY, &locals).unwrap();
        let manual = Pose::new(rot.position + rot.rotation.rotate(Vec3::new(0.0, 0.0, 0.1)), rot.rotation);
        assert!(s.socket_world_pose(&fk.world, "up").unwrap().max_abs_diff(&manual) < 1e-9);
    }

    #[test]
    fn random_five_joint_tree_matches_recursive_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut defs = Vec::new();
            for i in 0..5 {
                let parent = (i > 0).then(|| format!("j{}", rng.random_range(0..i)));
                let q = Quat::new(rng.random(), rng.random(), rng.random(), rng.random::<f64>() + 0.1).normalized();
                let t =
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                defs.push((format!("j{i}"), parent, Pose::new(t, q)));
            }
            let root = Pose::new(Vec3::new(0.5, -0.2, 1.0), Quat::rot_x(0.3));
            let s = Skeleton::new(defs.clone()).unwrap();
            let fk = s.forward_kinematics(&root, &JointPoseMap::new()).unwrap();
            for (name, _, _) in &defs {
                let want = recursive_world(&defs, &root, name);
                assert!(fk.get(&s, name).unwrap().max_abs_diff(&want) < 1e-9);
            }
        }
    }

    #[test]
    fn local_change_only_moves_subtree() {
        let p = Pose::from_translation(Vec3::X);
        let s = Skeleton::new(vec![
            ("r".into(), None, p),
            ("a".into(), Some("r".into()), p),
            ("a1".into(), Some("a".into()), p),
            ("b".into(), Some("r".into()), p),
        ])
        .unwrap();
        let base = s.forward_kinematics(&Pose::IDENTITY, &JointPoseMap::new()).unwrap();
        let mut locals = JointPoseMap::new();
        locals.insert("a".into(), Pose::new(Vec3::Y, Quat::rot_z(1.0)));
        let moved = s.forward_kinematics(&Pose::IDENTITY, &locals).unwrap();
        let sub = s.subtree(s.joint_index("a").unwrap());
        for i in 0..s.len() {
            assert_eq!(base.world[i] == moved.world[i], !sub.contains(&i), "joint {i}");
        }
    }
}
