//! Median-split bounding volume hierarchy over labeled triangles.
//!
//! Used for camera rays (nearest hit) and for sphere-vs-mesh contact
//! (closest point). Both queries have brute-force counterparts here that the
//! tests use as oracles.

use crate::math::Vec3;
use crate::mesh::{Aabb, TriMesh};

const LEAF_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [Vec3; 3],
    /// Per-vertex shading normals, if the source mesh had them.
    pub n: Option<[Vec3; 3]>,
    pub instance_id: u16,
    /// Index of the triangle within its source mesh.
    pub index: u32,
}

impl Triangle {
    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(self.v)
    }

    pub fn centroid(&self) -> Vec3 {
        (self.v[0] + self.v[1] + self.v[2]) / 3.0
    }

    pub fn face_normal(&self) -> Vec3 {
        (self.v[1] - self.v[0]).cross(self.v[2] - self.v[0]).normalized()
    }

    /// Shading normal at barycentric `(u, v)`.
    pub fn normal_at(&self, u: f64, v: f64) -> Vec3 {
        match self.n {
            Some(n) => {
                let s = n[0] * (1.0 - u - v) + n[1] * u + n[2] * v;
                if s.norm() > 1e-12 {
                    s.normalized()
                } else {
                    self.face_normal()
                }
            }
            None => self.face_normal(),
        }
    }

    /// Möller–Trumbore, double sided. Returns `(t, u, v)`.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64, f64)> {
        let e1 = self.v[1] - self.v[0];
        let e2 = self.v[2] - self.v[0];
        let p = ray.dir.cross(e2);
        let det = e1.dot(p);
        // |det| <= 1e-12·|e1||e2||dir|, squared to skip the square roots
        let scale2 = e1.norm_squared() * e2.norm_squared() * ray.dir.norm_squared();
        if det * det <= 1e-24 * scale2 {
            return None;
        }
        let inv = 1.0 / det;
        let s = ray.origin - self.v[0];
        let u = s.dot(p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(e1);
        let v = ray.dir.dot(q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = e2.dot(q) * inv;
        (t > ray.t_min && t < ray.t_max).then_some((t, u, v))
    }

    /// Closest point on the triangle to `p`.
    pub fn closest_point(&self, p: Vec3) -> Vec3 {
        let [a, b, c] = self.v;
        let ab = b - a;
        let ac = c - a;
        let ap = p - a;
        let d1 = ab.dot(ap);
        let d2 = ac.dot(ap);
        if d1 <= 0.0 && d2 <= 0.0 {
            return a;
        }
        let bp = p - b;
        let d3 = ab.dot(bp);
        let d4 = ac.dot(bp);
        if d3 >= 0.0 && d4 <= d3 {
            return b;
        }
        let vc = d1 * d4 - d3 * d2;
        if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
            return a + ab * (d1 / (d1 - d3));
        }
        let cp = p - c;
        let d5 = ab.dot(cp);
        let d6 = ac.dot(cp);
        if d6 >= 0.0 && d5 <= d6 {
            return c;
        }
        let vb = d5 * d2 - d1 * d6;
        if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
            return a + ac * (d2 / (d2 - d6));
        }
        let va = d3 * d6 - d5 * d4;
        if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
            return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
        }
        let denom = 1.0 / (va + vb + vc);
        a + ab * (vb * denom) + ac * (vc * denom)
    }
}

/// Ray `origin + t·dir`, accepted for `t` strictly inside `(t_min, t_max)`.
/// `dir` need not be unit length.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_min: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    /// Index into [`Bvh::triangles`].
    pub prim: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointQuery {
    pub distance: f64,
    pub point: Vec3,
    pub prim: usize,
}

#[derive(Debug, Clone, Copy)]
enum NodeKind {
    Leaf { start: u32, count: u32 },
    Inner { left: u32, right: u32 },
}

#[derive(Debug, Clone, Copy)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    triangles: Vec<Triangle>,
    nodes: Vec<Node>,
}

/// Ordering used to break exact ties in `t` so that results never depend on
/// traversal order.
fn closer(t: f64, tri: &Triangle, best: Option<(f64, &Triangle)>) -> bool {
    match best {
        None => true,
        Some((bt, btri)) => t < bt || (t == bt && (tri.instance_id, tri.index) < (btri.instance_id, btri.index)),
    }
}

impl Bvh {
    /// Builds the tree. Returns `None` for an empty triangle list.
    pub fn build(mut triangles: Vec<Triangle>) -> Option<Bvh> {
        if triangles.is_empty() {
            return None;
        }
        let mut nodes = Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1);
        let centroids: Vec<Vec3> = triangles.iter().map(Triangle::centroid).collect();
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        build_node(&triangles, &centroids, &mut order, 0, &mut nodes);
        triangles = order.iter().map(|&i| triangles[i]).collect();
        Some(Bvh { triangles, nodes })
    }

    /// Convenience: all triangles of one mesh labeled with `instance_id`.
    pub fn from_mesh(mesh: &TriMesh, instance_id: u16) -> Option<Bvh> {
        Bvh::build(mesh_triangles(mesh, instance_id))
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Leaf { .. })).count()
    }

    /// Nearest hit along `ray`.
    pub fn intersect(&self, ray: &Ray) -> Option<RayHit> {
        let inv = Vec3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best: Option<RayHit> = None;
        let mut t_max = ray.t_max;
        // (node, entry t); a median-split tree over u32 indices is at most 32 deep,
        // and each level leaves at most one sibling behind
        let mut stack = [(0u32, 0.0f64); 64];
        let t0 = slab(&self.nodes[0].bounds, ray.origin, inv, ray.t_min, t_max)?;
        stack[0] = (0, t0);
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let (ni, t_enter) = stack[sp];
            // entering strictly after the best hit cannot improve it; equal t still can (tie rule)
            if t_enter > t_max {
                continue;
            }
            match self.nodes[ni as usize].kind {
                NodeKind::Leaf { start, count } => {
                    for i in start as usize..(start + count) as usize {
                        let tri = &self.triangles[i];
                        if let Some((t, u, v)) = tri.intersect(ray) {
                            if closer(t, tri, best.map(|b| (b.t, &self.triangles[b.prim]))) {
                                best = Some(RayHit { t, prim: i, u, v });
                                t_max = t;
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = slab(&self.nodes[left as usize].bounds, ray.origin, inv, ray.t_min, t_max);
                    let dr = slab(&self.nodes[right as usize].bounds, ray.origin, inv, ray.t_min, t_max);
                    // nearer child on top
                    let mut push = |n: u32, t: f64| {
                        stack[sp] = (n, t);
                        sp += 1;
                    };
                    match (dl, dr) {
                        (Some(a), Some(b)) if a <= b => {
                            push(right, b);
                            push(left, a);
                        }
                        (Some(a), Some(b)) => {
                            push(left, a);
                            push(right, b);
                        }
                        (Some(a), None) => push(left, a),
                        (None, Some(b)) => push(right, b),
                        (None, None) => {}
                    }
                }
            }
        }
        best
    }

    /// Closest surface point to `p` within `max_distance` (inclusive).
    pub fn closest_point(&self, p: Vec3, max_distance: f64) -> Option<PointQuery> {
        let mut best: Option<PointQuery> = None;
        let mut limit2 = max_distance * max_distance;
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.bounds.distance_squared(p) > limit2 {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for i in start as usize..(start + count) as usize {
                        let q = self.triangles[i].closest_point(p);
                        let d2 = (q - p).norm_squared();
                        if d2 <= limit2 && best.is_none_or(|b| d2 < b.distance * b.distance) {
                            best = Some(PointQuery { distance: d2.sqrt(), point: q, prim: i });
                            limit2 = d2;
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }

    /// Checks the structural invariants: every triangle in exactly one leaf
    /// and every node box containing its children.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = vec![0u32; self.triangles.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            match n.kind {
                NodeKind::Leaf { start, count } => {
                    for k in start..start + count {
                        seen[k as usize] += 1;
                        if !n.bounds.contains(&self.triangles[k as usize].bounds()) {
                            return Err(format!("leaf {i} does not contain triangle {k}"));
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    for c in [left, right] {
                        if !n.bounds.contains(&self.nodes[c as usize].bounds) {
                            return Err(format!("node {i} does not contain child {c}"));
                        }
                    }
                }
            }
        }
        match seen.iter().position(|&c| c != 1) {
            Some(k) => Err(format!("triangle {k} referenced {} times", seen[k])),
            None => Ok(()),
        }
    }
}

pub fn mesh_triangles(mesh: &TriMesh, instance_id: u16) -> Vec<Triangle> {
    (0..mesh.triangles.len())
        .map(|i| {
            let t = mesh.triangles[i];
            Triangle {
                v: mesh.triangle(i),
                n: mesh.normals.as_ref().map(|ns| [ns[t[0] as usize], ns[t[1] as usize], ns[t[2] as usize]]),
                instance_id,
                index: i as u32,
            }
        })
        .collect()
}

/// Reference nearest-hit over every triangle, with the same tie rule as the tree.
pub fn brute_force_intersect(triangles: &[Triangle], ray: &Ray) -> Option<(f64, Triangle)> {
    let mut best: Option<(f64, &Triangle)> = None;
    for tri in triangles {
        if let Some((t, _, _)) = tri.intersect(ray) {
            if closer(t, tri, best) {
                best = Some((t, tri));
            }
        }
    }
    best.map(|(t, tri)| (t, *tri))
}

/// Reference closest-point query over every triangle.
pub fn brute_force_closest(triangles: &[Triangle], p: Vec3) -> Option<(f64, usize)> {
    triangles.iter().enumerate().map(|(i, t)| ((t.closest_point(p) - p).norm(), i)).min_by(|a, b| a.0.total_cmp(&b.0))
}

fn pad(b: Aabb) -> Aabb {
    let m = b.min.x.abs().max(b.min.y.abs()).max(b.min.z.abs());
    let n = b.max.x.abs().max(b.max.y.abs()).max(b.max.z.abs());
    let eps = 1e-9 * (1.0 + m.max(n));
    Aabb::new(b.min - Vec3::splat(eps), b.max + Vec3::splat(eps))
}

fn build_node(tris: &[Triangle], centroids: &[Vec3], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let bounds = pad(order.iter().fold(Aabb::EMPTY, |b, &i| b.union(tris[i].bounds())));
    let idx = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(Node { bounds, kind: NodeKind::Leaf { start: offset as u32, count: order.len() as u32 } });
        return idx;
    }
    let cb = Aabb::from_points(order.iter().map(|&i| centroids[i]));
    let e = cb.extent();
    let axis = if e.x >= e.y && e.x >= e.z {
        0
    } else if e.y >= e.z {
        1
    } else {
        2
    };
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a].axis(axis).total_cmp(&centroids[b].axis(axis)).then(a.cmp(&b))
    });
    nodes.push(Node { bounds, kind: NodeKind::Leaf { start: 0, count: 0 } });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_node(tris, centroids, lo, offset, nodes);
    let right = build_node(tris, centroids, hi, offset + mid, nodes);
    nodes[idx as usize].kind = NodeKind::Inner { left, right };
    idx
}

/// Slab test. Returns the entry parameter if the ray overlaps the box
/// within `[t_min, t_max]`.
fn slab(b: &Aabb, o: Vec3, inv: Vec3, t_min: f64, t_max: f64) -> Option<f64> {
    let mut lo = t_min;
    let mut hi = t_max;
    for k in 0..3 {
        let (bmin, bmax, oi, id) = (b.min.axis(k), b.max.axis(k), o.axis(k), inv.axis(k));
        if id.is_infinite() {
            // parallel to this slab
            if oi < bmin || oi > bmax {
                return None;
            }
            continue;
        }
        let mut t0 = (bmin - oi) * id;
        let mut t1 = (bmax - oi) * id;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        lo = lo.max(t0);
        hi = hi.min(t1);
        if lo > hi {
            return None;
        }
    }
    Some(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_triangles(rng: &mut ChaCha8Rng, n: usize) -> Vec<Triangle> {
        (0..n)
            .map(|i| {
                let c =
                    Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
                let mut j =
                    || Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
                Triangle { v: [c + j(), c + j(), c + j()], n: None, instance_id: (i % 50 + 1) as u16, index: i as u32 }
            })
            .collect()
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
        let origin = Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
        let target = Vec3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        Ray { origin, dir: target - origin, t_min: 0.0, t_max: f64::INFINITY }
    }

    #[test]
    fn single_triangle_is_one_leaf() {
        let tri = Triangle { v: [Vec3::ZERO, Vec3::X, Vec3::Y], n: None, instance_id: 1, index: 0 };
        let bvh = Bvh::build(vec![tri]).unwrap();
        assert_eq!(bvh.node_count(), 1);
        assert_eq!(bvh.leaf_count(), 1);
        assert!(Bvh::build(vec![]).is_none());
    }

    #[test]
    fn cube_rays_match_brute_force() {
        let mesh = TriMesh::cuboid(Vec3::splat(1.0)).unwrap();
        let tris = mesh_triangles(&mesh, 3);
        let bvh = Bvh::build(tris.clone()).unwrap();
        bvh.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reached = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let ray = random_ray(&mut rng);
            let a = bvh.intersect(&ray);
            let b = brute_force_intersect(&tris, &ray);
            assert_eq!(a.map(|h| (h.t, bvh.triangles()[h.prim].index)), b.map(|(t, tri)| (t, tri.index)));
            if let Some(h) = a {
                reached.insert(bvh.triangles()[h.prim].index);
            }
        }
        assert_eq!(reached.len(), 12);
    }

    #[test]
    fn random_soup_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tris = random_triangles(&mut rng, 3000);
        let bvh = Bvh::build(tris.clone()).unwrap();
        bvh.validate().unwrap();
        for _ in 0..500 {
            let ray = random_ray(&mut rng);
            let a = bvh.intersect(&ray).map(|h| (h.t, bvh.triangles()[h.prim].instance_id));
            let b = brute_force_intersect(&tris, &ray).map(|(t, tri)| (t, tri.instance_id));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn axis_parallel_ray_through_slabs() {
        let mesh = TriMesh::cuboid(Vec3::splat(1.0)).unwrap();
        let bvh = Bvh::from_mesh(&mesh, 1).unwrap();
        let ray = Ray { origin: Vec3::new(0.1, 0.2, 5.0), dir: -Vec3::Z, t_min: 0.0, t_max: f64::INFINITY };
        let h = bvh.intersect(&ray).unwrap();
        assert!((h.t - 4.5).abs() < 1e-12);
        let miss = Ray { origin: Vec3::new(0.0, 0.0, 5.0), dir: Vec3::X, t_min: 0.0, t_max: f64::INFINITY };
        assert!(bvh.intersect(&miss).is_none());
    }

    #[test]
    fn closest_point_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tris = random_triangles(&mut rng, 400);
        let bvh = Bvh::build(tris.clone()).unwrap();
        for _ in 0..500 {
            let p = Vec3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let r = rng.random_range(0.0..1.5);
            let got = bvh.closest_point(p, r).map(|q| q.distance);
            let want = brute_force_closest(&tris, p).map(|(d, _)| d).filter(|&d| d <= r);
            assert_eq!(got.is_some(), want.is_some());
            if let (Some(a), Some(b)) = (got, want) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn closest_point_on_face_interior() {
        let tri = Triangle { v: [Vec3::ZERO, Vec3::X * 2.0, Vec3::Y * 2.0], n: None, instance_id: 1, index: 0 };
        let q = tri.closest_point(Vec3::new(0.5, 0.5, 0.3));
        assert!(q.max_abs_diff(Vec3::new(0.5, 0.5, 0.0)) < 1e-15);
        assert_eq!(tri.closest_point(Vec3::new(-1.0, -1.0, 0.0)), Vec3::ZERO);
    }
}
