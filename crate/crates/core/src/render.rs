//! Ray-cast ground truth: RGB, planar depth, instance/class masks and
//! normals, plus boxes, poses and labeled point clouds derived from them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bvh::{mesh_triangles, Bvh, Triangle};
use crate::camera::{CameraDef, Projected};
use crate::math::{Pose, Quat, Vec3};
use crate::scene::{Lights, Scene, SceneSnapshot, ROBOT_CLASS_ID, ROBOT_INSTANCE_BASE};

/// Surface color of robot links.
pub const ROBOT_ALBEDO: [f64; 3] = [0.7, 0.7, 0.72];
pub const DEFAULT_DEPTH_SCALE: f64 = 0.001;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("scene has no geometry")]
    EmptyGeometry,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rgb,
    Depth,
    Mask,
    ClassMask,
    Normal,
    Pointcloud,
    Annotations,
}

impl Mode {
    pub const ALL: [Mode; 7] =
        [Mode::Rgb, Mode::Depth, Mode::Mask, Mode::ClassMask, Mode::Normal, Mode::Pointcloud, Mode::Annotations];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rgb => "rgb",
            Mode::Depth => "depth",
            Mode::Mask => "mask",
            Mode::ClassMask => "class_mask",
            Mode::Normal => "normal",
            Mode::Pointcloud => "pointcloud",
            Mode::Annotations => "annotations",
        }
    }

    /// Modes that produce one PNG per camera.
    pub fn is_image(self) -> bool {
        matches!(self, Mode::Rgb | Mode::Depth | Mode::Mask | Mode::ClassMask | Mode::Normal)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown mode '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    pub class_id: u16,
    pub albedo: [f64; 3],
}

/// World-space triangles of one posed frame, with per-instance materials.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub bvh: Option<Bvh>,
    pub materials: BTreeMap<u16, Material>,
}

/// World triangles for every object and robot display link at the snapshot poses.
pub fn posed_triangles(scene: &Scene, snap: &SceneSnapshot) -> (Vec<Triangle>, BTreeMap<u16, Material>) {
    let mut tris = Vec::new();
    let mut materials = BTreeMap::new();
    for (o, st) in scene.objects.iter().zip(&snap.objects) {
        tris.extend(mesh_triangles(&o.mesh.transformed(&st.pose), o.instance_id));
        materials.insert(o.instance_id, Material { class_id: o.class_id, albedo: o.albedo });
    }
    for (k, link) in scene.robot.skeleton.links.iter().enumerate() {
        let id = ROBOT_INSTANCE_BASE + k as u16;
        let pose = snap.joints[link.joint].compose(&link.offset);
        tris.extend(mesh_triangles(&link.mesh.transformed(&pose), id));
        materials.insert(id, Material { class_id: ROBOT_CLASS_ID, albedo: ROBOT_ALBEDO });
    }
    (tris, materials)
}

/// BVH over the posed scene; fails when there is nothing to hit.
pub fn build_bvh(scene: &Scene, snap: &SceneSnapshot) -> Result<Bvh, RenderError> {
    Bvh::build(posed_triangles(scene, snap).0).ok_or(RenderError::EmptyGeometry)
}

impl SceneGeometry {
    pub fn new(scene: &Scene, snap: &SceneSnapshot) -> SceneGeometry {
        let (tris, materials) = posed_triangles(scene, snap);
        SceneGeometry { bvh: Bvh::build(tris), materials }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    /// Camera-frame Z of the hit point.
    pub planar_depth: f64,
    pub instance_id: u16,
    pub class_id: u16,
    /// Unit world normal facing back toward the camera.
    pub normal: Vec3,
    pub albedo: [f64; 3],
}

/// Nearest hit along the ray through the center of pixel `(u, v)`.
pub fn trace_pixel(geom: &SceneGeometry, cam: &CameraDef, pose: &Pose, u: u32, v: u32) -> Option<Hit> {
    let bvh = geom.bvh.as_ref()?;
    let ray = cam.pixel_ray(pose, u, v);
    let h = bvh.intersect(&ray)?;
    let tri = &bvh.triangles()[h.prim];
    let mut n = tri.normal_at(h.u, h.v);
    if n.dot(ray.dir) > 0.0 {
        n = -n;
    }
    let mat = geom.materials.get(&tri.instance_id).copied().unwrap_or(Material { class_id: 0, albedo: [1.0; 3] });
    // the camera-frame ray direction has z = 1, so t is the planar depth
    Some(Hit {
        t: h.t,
        planar_depth: h.t,
        instance_id: tri.instance_id,
        class_id: mat.class_id,
        normal: n,
        albedo: mat.albedo,
    })
}

/// `[0,1]` to 8 bits, halves rounded away from zero.
pub fn quantize8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lambertian shading; light directions point from the light into the scene.
pub fn shade_rgb(hit: &Hit, lights: &Lights) -> [u8; 3] {
    let mut k = lights.ambient;
    for l in &lights.directional {
        let to_light = -Vec3::from(l.direction).normalized();
        k += l.intensity * hit.normal.dot(to_light).max(0.0);
    }
    hit.albedo.map(|a| quantize8(a * k))
}

pub fn encode_normal(n: Vec3) -> [u8; 3] {
    [n.x, n.y, n.z].map(|c| (255.0 * (c + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8)
}

pub fn decode_normal(px: [u8; 3]) -> Vec3 {
    let d = |c: u8| c as f64 / 255.0 * 2.0 - 1.0;
    Vec3::new(d(px[0]), d(px[1]), d(px[2]))
}

/// Depth units for a hit; never 0, which marks background.
pub fn quantize_depth(planar_depth: f64, depth_scale: f64) -> u16 {
    (planar_depth / depth_scale).round().clamp(1.0, 65535.0) as u16
}

/// All image buffers for one camera at one frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedViews {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
    pub depth: Vec<u16>,
    pub instance: Vec<u16>,
    pub class: Vec<u16>,
    pub normal: Vec<u8>,
}

impl RenderedViews {
    fn blank(width: u32, height: u32) -> RenderedViews {
        let n = (width * height) as usize;
        RenderedViews {
            width,
            height,
            rgb: vec![0; 3 * n],
            depth: vec![0; n],
            instance: vec![0; n],
            class: vec![0; n],
            normal: vec![0; 3 * n],
        }
    }
}

/// Traces every pixel once; rows are traced in parallel.
pub fn render_view(
    geom: &SceneGeometry,
    lights: &Lights,
    cam: &CameraDef,
    pose: &Pose,
    depth_scale: f64,
) -> RenderedViews {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let mut out = RenderedViews::blank(w, h);
    let wu = w as usize;
    out.rgb
        .par_chunks_mut(3 * wu)
        .zip(out.depth.par_chunks_mut(wu))
        .zip(out.instance.par_chunks_mut(wu))
        .zip(out.class.par_chunks_mut(wu))
        .zip(out.normal.par_chunks_mut(3 * wu))
        .enumerate()
        .for_each(|(v, ((((rgb, depth), inst), class), normal))| {
            for u in 0..wu {
                let Some(hit) = trace_pixel(geom, cam, pose, u as u32, v as u32) else { continue };
                rgb[3 * u..3 * u + 3].copy_from_slice(&shade_rgb(&hit, lights));
                depth[u] = quantize_depth(hit.planar_depth, depth_scale);
                inst[u] = hit.instance_id;
                class[u] = hit.class_id;
                normal[3 * u..3 * u + 3].copy_from_slice(&encode_normal(hit.normal));
            }
        });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MaskBox {
    /// `[umin, vmin, umax, vmax]`, inclusive pixel indices.
    pub bbox: [u32; 4],
    pub pixel_count: u64,
}

/// Tight box and pixel count per nonzero id.
pub fn mask_to_2d_boxes(mask: &[u16], width: u32) -> BTreeMap<u16, MaskBox> {
    let mut out: BTreeMap<u16, MaskBox> = BTreeMap::new();
    for (i, &id) in mask.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let (u, v) = ((i % width as usize) as u32, (i / width as usize) as u32);
        out.entry(id)
            .and_modify(|b| {
                b.bbox = [b.bbox[0].min(u), b.bbox[1].min(v), b.bbox[2].max(u), b.bbox[3].max(v)];
                b.pixel_count += 1;
            })
            .or_insert(MaskBox { bbox: [u, v, u, v], pixel_count: 1 });
    }
    out
}

/// World point and labels of one depth pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub position: Vec3,
    pub instance_id: u16,
    pub class_id: u16,
}

pub fn depth_to_pointcloud(views: &RenderedViews, cam: &CameraDef, pose: &Pose, depth_scale: f64) -> Vec<LabeledPoint> {
    let w = views.width as usize;
    views
        .depth
        .iter()
        .enumerate()
        .filter(|(_, &d)| d != 0)
        .map(|(i, &d)| {
            let p = cam.backproject_pixel((i % w) as u32, (i / w) as u32, d as f64 * depth_scale);
            LabeledPoint { position: pose.transform_point(p), instance_id: views.instance[i], class_id: views.class[i] }
        })
        .collect()
}

pub fn ply_string(points: &[LabeledPoint]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
         property ushort instance_id\nproperty ushort class_id\nend_header\n",
        points.len()
    );
    for p in points {
        use std::fmt::Write as _;
        let _ =
            writeln!(s, "{:.6} {:.6} {:.6} {} {}", p.position.x, p.position.y, p.position.z, p.instance_id, p.class_id);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseJson {
    pub position: Vec3,
    pub rotation: Quat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibleObject {
    pub name: String,
    pub instance_id: u16,
    pub class_id: u16,
    pub bbox: [u32; 4],
    pub pixel_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraAnnotation {
    pub name: String,
    pub pose: PoseJson,
    pub visible: Vec<VisibleObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectAnnotation {
    pub name: String,
    pub instance_id: u16,
    pub class: String,
    pub class_id: u16,
    pub pose: PoseJson,
    pub aabb_min: Vec3,
    pub aabb_max: Vec3,
    /// Camera name to the 8 projected box corners; `None` behind the camera.
    pub corners_px: BTreeMap<String, Vec<Option<[f64; 2]>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameAnnotations {
    pub frame_index: usize,
    pub frame_id: u64,
    pub timestamp_ms: u64,
    pub cameras: Vec<CameraAnnotation>,
    pub objects: Vec<ObjectAnnotation>,
}

/// Pixel coordinates of a world point (pixel `i` spans `[i, i+1)`).
pub fn project_world(cam: &CameraDef, pose: &Pose, p: Vec3) -> Projected {
    cam.project(pose.inverse().transform_point(p))
}

fn instance_name(scene: &Scene, id: u16) -> String {
    if id >= ROBOT_INSTANCE_BASE {
        let k = (id - ROBOT_INSTANCE_BASE) as usize;
        let joint = scene.robot.skeleton.links[k].joint;
        return format!("robot/{}", scene.robot.skeleton.joints()[joint].name);
    }
    scene.objects.iter().find(|o| o.instance_id == id).map(|o| o.name.clone()).unwrap_or_default()
}

/// Merges recorded poses and boxes with mask-derived 2D boxes. `views`
/// pairs each scene camera index with its rendered buffers.
pub fn annotations_for_frame(
    scene: &Scene,
    snap: &SceneSnapshot,
    frame_index: usize,
    views: &[(usize, &RenderedViews)],
) -> FrameAnnotations {
    let cameras = views
        .iter()
        .map(|&(ci, v)| {
            let pose = snap.cameras[ci];
            CameraAnnotation {
                name: scene.cameras[ci].name.clone(),
                pose: PoseJson { position: pose.position, rotation: pose.rotation },
                visible: mask_to_2d_boxes(&v.instance, v.width)
                    .into_iter()
                    .map(|(id, b)| {
                        let first = v.instance.iter().position(|&x| x == id).expect("id came from the mask");
                        VisibleObject {
                            name: instance_name(scene, id),
                            instance_id: id,
                            class_id: v.class[first],
                            bbox: b.bbox,
                            pixel_count: b.pixel_count,
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    let objects = scene
        .objects
        .iter()
        .zip(&snap.objects)
        .map(|(o, st)| ObjectAnnotation {
            name: o.name.clone(),
            instance_id: o.instance_id,
            class: o.class_name.clone(),
            class_id: o.class_id,
            pose: PoseJson { position: st.pose.position, rotation: st.pose.rotation },
            aabb_min: st.aabb.min,
            aabb_max: st.aabb.max,
            corners_px: views
                .iter()
                .map(|&(ci, _)| {
                    let cam = &scene.cameras[ci];
                    let corners = st
                        .aabb
                        .corners()
                        .iter()
                        .map(|&c| project_world(cam, &snap.cameras[ci], c).pixel().map(|(u, v)| [u, v]))
                        .collect();
                    (cam.name.clone(), corners)
                })
                .collect(),
        })
        .collect();
    FrameAnnotations { frame_index, frame_id: snap.frame_id, timestamp_ms: snap.timestamp_ms, cameras, objects }
}

/// Raw PNG bytes; deterministic for identical input.
pub fn encode_png(
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>, png::EncodingError> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width, height);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc.write_header()?;
        w.write_image_data(data)?;
    }
    Ok(buf)
}

pub fn png_rgb8(width: u32, height: u32, data: &[u8]) -> Vec<u8> {
    encode_png(width, height, png::ColorType::Rgb, png::BitDepth::Eight, data).expect("in-memory encode")
}

pub fn png_gray16(width: u32, height: u32, data: &[u16]) -> Vec<u8> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes).expect("in-memory encode")
}

/// PNG bytes for one image mode.
pub fn image_bytes(views: &RenderedViews, mode: Mode) -> Option<Vec<u8>> {
    let (w, h) = (views.width, views.height);
    Some(match mode {
        Mode::Rgb => png_rgb8(w, h, &views.rgb),
        Mode::Normal => png_rgb8(w, h, &views.normal),
        Mode::Depth => png_gray16(w, h, &views.depth),
        Mode::Mask => png_gray16(w, h, &views.instance),
        Mode::ClassMask => png_gray16(w, h, &views.class),
        Mode::Pointcloud | Mode::Annotations => return None,
    })
}

/// Decoded PNG: width, height and samples widened to u16.
pub fn read_png(path: &Path) -> Result<(u32, u32, Vec<u16>), String> {
    let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file)).read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; dec.output_buffer_size().ok_or("image too large")?];
    let info = dec.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let data = &buf[..info.buffer_size()];
    let samples = match info.bit_depth {
        png::BitDepth::Sixteen => data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect(),
        _ => data.iter().map(|&b| b as u16).collect(),
    };
    Ok((info.width, info.height, samples))
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RenderError> {
    let io = |source| RenderError::Io { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}
