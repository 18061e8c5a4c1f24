//! Triangle meshes, axis-aligned boxes, built-in primitives and a minimal
//! Wavefront OBJ reader (`v`, `vn`, `f`; everything else ignored).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Pose, Vec3};

/// Triangles with area at or below this are dropped at load time.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("mesh has no triangles")]
    Empty,
    #[error("invalid primitive dimensions: {0}")]
    BadDimensions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        min: Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        max: Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
    };

    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn from_points<I: IntoIterator<Item = Vec3>>(points: I) -> Aabb {
        points.into_iter().fold(Aabb::EMPTY, |b, p| b.grow(p))
    }

    pub fn grow(self, p: Vec3) -> Aabb {
        Aabb { min: self.min.min(p), max: self.max.max(p) }
    }

    pub fn union(self, o: Aabb) -> Aabb {
        Aabb { min: self.min.min(o.min), max: self.max.max(o.max) }
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x || self.min.y > self.max.y || self.min.z > self.max.z
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn contains(&self, o: &Aabb) -> bool {
        self.min.x <= o.min.x
            && self.min.y <= o.min.y
            && self.min.z <= o.min.z
            && self.max.x >= o.max.x
            && self.max.y >= o.max.y
            && self.max.z >= o.max.z
    }

    /// Squared distance from `p` to the box (0 inside).
    pub fn distance_squared(&self, p: Vec3) -> f64 {
        let d = (self.min - p).max(p - self.max).max(Vec3::ZERO);
        d.norm_squared()
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    pub fn overlaps_xy(&self, o: &Aabb) -> bool {
        self.min.x <= o.max.x && o.min.x <= self.max.x && self.min.y <= o.max.y && o.min.y <= self.max.y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Per-vertex shading normals. When absent, flat face normals are used.
    pub normals: Option<Vec<Vec3>>,
}

impl TriMesh {
    /// Builds a mesh, dropping out-of-range and degenerate triangles.
    /// Returns the mesh and the number of dropped triangles.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>, normals: Option<Vec<Vec3>>) -> (TriMesh, usize) {
        let n = vertices.len() as u32;
        let before = triangles.len();
        let triangles: Vec<[u32; 3]> = triangles
            .into_iter()
            .filter(|t| t.iter().all(|&i| i < n))
            .filter(|t| {
                let (a, b, c) = (vertices[t[0] as usize], vertices[t[1] as usize], vertices[t[2] as usize]);
                0.5 * (b - a).cross(c - a).norm() > MIN_TRIANGLE_AREA
            })
            .collect();
        let dropped = before - triangles.len();
        let normals = normals.filter(|ns| ns.len() == vertices.len());
        (TriMesh { vertices, triangles, normals }, dropped)
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let t = self.triangles[i];
        [self.vertices[t[0] as usize], self.vertices[t[1] as usize], self.vertices[t[2] as usize]]
    }

    pub fn face_normal(&self, i: usize) -> Vec3 {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(c - a).normalized()
    }

    pub fn local_aabb(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter().copied())
    }

    /// Bakes a per-axis scale into the vertices.
    pub fn scaled(&self, scale: Vec3) -> TriMesh {
        let vertices = self.vertices.iter().map(|v| v.mul_elem(scale)).collect();
        // inverse-transpose for normals under non-uniform scale
        let inv = Vec3::new(1.0 / scale.x, 1.0 / scale.y, 1.0 / scale.z);
        let normals = self.normals.as_ref().map(|ns| ns.iter().map(|n| n.mul_elem(inv).normalized()).collect());
        let mut out = TriMesh { vertices, triangles: self.triangles.clone(), normals };
        if scale.x * scale.y * scale.z < 0.0 {
            // mirrored: restore winding
            for t in &mut out.triangles {
                t.swap(1, 2);
            }
        }
        out
    }

    /// Copy of the mesh with every vertex moved by `pose`.
    pub fn transformed(&self, pose: &Pose) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| pose.transform_point(v)).collect(),
            triangles: self.triangles.clone(),
            normals: self.normals.as_ref().map(|ns| ns.iter().map(|&n| pose.transform_vector(n)).collect()),
        }
    }

    /// Axis-aligned box on `size` (full extents), centered at the origin.
    pub fn cuboid(size: Vec3) -> Result<TriMesh, MeshError> {
        if !(size.x > 0.0 && size.y > 0.0 && size.z > 0.0) {
            return Err(MeshError::BadDimensions(format!("box {size:?}")));
        }
        let h = size * 0.5;
        let vertices = Aabb::new(-h, h).corners().to_vec();
        // corner index bits: x=1, y=2, z=4; counter-clockwise seen from outside
        let triangles = vec![
            [0, 2, 1],
            [1, 2, 3], // -z
            [4, 5, 6],
            [5, 7, 6], // +z
            [0, 1, 4],
            [1, 5, 4], // -y
            [2, 6, 3],
            [3, 6, 7], // +y
            [0, 4, 2],
            [2, 4, 6], // -x
            [1, 3, 5],
            [3, 7, 5], // +x
        ];
        Ok(TriMesh { vertices, triangles, normals: None })
    }

    /// UV sphere with smooth normals.
    pub fn uv_sphere(radius: f64, segments: u32, rings: u32) -> Result<TriMesh, MeshError> {
        if radius.is_nan() || radius <= 0.0 || segments < 3 || rings < 2 {
            return Err(MeshError::BadDimensions(format!("sphere r={radius} {segments}x{rings}")));
        }
        let mut vertices = vec![Vec3::new(0.0, 0.0, radius)];
        for r in 1..rings {
            let theta = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                vertices.push(Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()) * radius);
            }
        }
        vertices.push(Vec3::new(0.0, 0.0, -radius));
        let bottom = vertices.len() as u32 - 1;
        let ring = |r: u32, s: u32| 1 + (r - 1) * segments + (s % segments);
        let mut triangles = Vec::new();
        for s in 0..segments {
            triangles.push([0, ring(1, s), ring(1, s + 1)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
                triangles.push([a, c, b]);
                triangles.push([b, c, d]);
            }
        }
        for s in 0..segments {
            triangles.push([bottom, ring(rings - 1, s + 1), ring(rings - 1, s)]);
        }
        let normals = vertices.iter().map(|v| v.normalized()).collect();
        Ok(TriMesh::new(vertices, triangles, Some(normals)).0)
    }

    /// Closed cylinder along Z, centered at the origin.
    pub fn cylinder(radius: f64, height: f64, segments: u32) -> Result<TriMesh, MeshError> {
        if !(radius > 0.0 && height > 0.0) || segments < 3 {
            return Err(MeshError::BadDimensions(format!("cylinder r={radius} h={height}")));
        }
        let hz = height * 0.5;
        let mut vertices = vec![Vec3::new(0.0, 0.0, -hz), Vec3::new(0.0, 0.0, hz)];
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            let (y, x) = phi.sin_cos();
            vertices.push(Vec3::new(x * radius, y * radius, -hz));
            vertices.push(Vec3::new(x * radius, y * radius, hz));
        }
        let lo = |s: u32| 2 + 2 * (s % segments);
        let hi = |s: u32| 3 + 2 * (s % segments);
        let mut triangles = Vec::new();
        for s in 0..segments {
            triangles.push([0, lo(s + 1), lo(s)]);
            triangles.push([1, hi(s), hi(s + 1)]);
            triangles.push([lo(s), lo(s + 1), hi(s)]);
            triangles.push([lo(s + 1), hi(s + 1), hi(s)]);
        }
        Ok(TriMesh { vertices, triangles, normals: None })
    }

    /// Parses OBJ text. Polygons are fan-triangulated; negative (relative)
    /// indices are honored. Normals are kept only when every vertex gets one.
    pub fn parse_obj(text: &str, origin: &str) -> Result<(TriMesh, usize), MeshError> {
        let mut vertices = Vec::new();
        let mut file_normals = Vec::new();
        let mut vertex_normal: Vec<Option<usize>> = Vec::new();
        let mut triangles = Vec::new();
        let err = |line: usize, detail: String| MeshError::Parse { path: origin.to_string(), line, detail };

        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let c: Vec<f64> = parts
                        .take(3)
                        .map(|s| s.parse::<f64>().map_err(|e| err(lineno, format!("bad vertex: {e}"))))
                        .collect::<Result<_, _>>()?;
                    if c.len() < 3 {
                        return Err(err(lineno, "vertex needs 3 coordinates".into()));
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                    vertex_normal.push(None);
                }
                Some("vn") => {
                    let c: Vec<f64> = parts
                        .take(3)
                        .map(|s| s.parse::<f64>().map_err(|e| err(lineno, format!("bad normal: {e}"))))
                        .collect::<Result<_, _>>()?;
                    if c.len() < 3 {
                        return Err(err(lineno, "normal needs 3 components".into()));
                    }
                    file_normals.push(Vec3::new(c[0], c[1], c[2]).normalized());
                }
                Some("f") => {
                    let mut face = Vec::new();
                    for item in parts {
                        let mut refs = item.split('/');
                        let v = resolve_index(refs.next().unwrap_or(""), vertices.len())
                            .ok_or_else(|| err(lineno, format!("bad vertex index '{item}'")))?;
                        let _tex = refs.next();
                        if let Some(n) = refs.next().filter(|s| !s.is_empty()) {
                            let n = resolve_index(n, file_normals.len())
                                .ok_or_else(|| err(lineno, format!("bad normal index '{item}'")))?;
                            vertex_normal[v] = Some(n);
                        }
                        face.push(v as u32);
                    }
                    if face.len() < 3 {
                        return Err(err(lineno, "face needs at least 3 vertices".into()));
                    }
                    for i in 1..face.len() - 1 {
                        triangles.push([face[0], face[i], face[i + 1]]);
                    }
                }
                _ => {}
            }
        }
        let normals = if !vertex_normal.is_empty() && vertex_normal.iter().all(Option::is_some) {
            Some(vertex_normal.iter().map(|n| file_normals[n.unwrap()]).collect())
        } else {
            None
        };
        let (mesh, dropped) = TriMesh::new(vertices, triangles, normals);
        if mesh.triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        Ok((mesh, dropped))
    }

    pub fn load_obj(path: &Path) -> Result<(TriMesh, usize), MeshError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| MeshError::Io { path: path.display().to_string(), source })?;
        TriMesh::parse_obj(&text, &path.display().to_string())
    }
}

fn resolve_index(s: &str, count: usize) -> Option<usize> {
    let i: i64 = s.parse().ok()?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        count as i64 + i
    } else {
        return None;
    };
    (idx >= 0 && (idx as usize) < count).then_some(idx as usize)
}

/// Tight world-space box of `mesh` after scaling then placing it at `pose`.
pub fn world_aabb(mesh: &TriMesh, pose: &Pose, scale: Vec3) -> Result<Aabb, MeshError> {
    if mesh.vertices.is_empty() {
        return Err(MeshError::Empty);
    }
    Ok(Aabb::from_points(mesh.vertices.iter().map(|v| pose.transform_point(v.mul_elem(scale)))))
}
