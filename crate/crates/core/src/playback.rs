//! Offline replay of a recorded sequence: frame selection, re-posing the
//! scene verbatim from the record, and writing the ground-truth dataset.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::resolve_camera_pose;
use crate::math::Pose;
use crate::mesh::Aabb;
use crate::recorder::{validate_sequence, FrameRecord, RecordError, Sequence};
use crate::render::{
    annotations_for_frame, depth_to_pointcloud, image_bytes, ply_string, render_view, write_atomic, Mode, RenderError,
    RenderedViews, SceneGeometry, DEFAULT_DEPTH_SCALE,
};
use crate::scene::{ObjectState, Scene, SceneSnapshot};

#[derive(Debug, Error)]
pub enum PlaybackError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("empty sequence")]
    Empty,
    #[error("sequence does not match scene: {0}")]
    SceneMismatch(String),
    #[error("frame {frame}: missing {kind} '{name}'")]
    MissingEntity { frame: u64, kind: &'static str, name: String },
    #[error("frame {frame}, camera {camera}: {detail}")]
    Camera { frame: u64, camera: String, detail: String },
    #[error("invalid options: {0}")]
    Options(String),
    #[error(transparent)]
    Output(#[from] RenderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaybackOptions {
    /// Frames dropped from the start.
    pub skip: usize,
    /// Frames kept after skipping; `None` keeps the rest.
    pub keep: Option<usize>,
    pub modes: BTreeSet<Mode>,
    pub output_dir: PathBuf,
    /// Meters per depth unit.
    pub depth_scale: f64,
    /// Worker threads; frames are processed concurrently.
    pub workers: usize,
}

impl PlaybackOptions {
    pub fn new(output_dir: impl Into<PathBuf>) -> PlaybackOptions {
        PlaybackOptions {
            skip: 0,
            keep: None,
            modes: Mode::ALL.into_iter().collect(),
            output_dir: output_dir.into(),
            depth_scale: DEFAULT_DEPTH_SCALE,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), PlaybackError> {
        if self.modes.is_empty() {
            return Err(PlaybackError::Options("no output modes".into()));
        }
        if self.keep == Some(0) {
            return Err(PlaybackError::Options("keep must be positive".into()));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(PlaybackError::Options("depth scale must be positive".into()));
        }
        if self.workers == 0 {
            return Err(PlaybackError::Options("need at least one worker".into()));
        }
        Ok(())
    }
}

/// Checks that the sequence's entities exist in `scene` with matching ids.
pub fn check_against_scene(seq: &Sequence, scene: &Scene) -> Result<(), PlaybackError> {
    let m = &seq.meta;
    for c in &m.cameras {
        if scene.camera_index(c).is_none() {
            return Err(PlaybackError::SceneMismatch(format!("camera '{c}' not in scene")));
        }
    }
    for o in &m.objects {
        let Some(i) = scene.object_index(&o.name) else {
            return Err(PlaybackError::SceneMismatch(format!("object '{}' not in scene", o.name)));
        };
        let so = &scene.objects[i];
        if so.instance_id != o.instance_id || so.class_id != o.class_id {
            return Err(PlaybackError::SceneMismatch(format!("object '{}' ids differ", o.name)));
        }
    }
    if m.objects.len() != scene.objects.len() {
        return Err(PlaybackError::SceneMismatch("object count differs".into()));
    }
    if !m.joints.iter().map(String::as_str).eq(scene.robot.skeleton.joint_names()) {
        return Err(PlaybackError::SceneMismatch("joint list differs from robot skeleton".into()));
    }
    Ok(())
}

/// Reads, validates and cross-checks a sequence file.
pub fn load_sequence(path: &Path, scene: &Scene) -> Result<Sequence, PlaybackError> {
    let seq = Sequence::load(path)?;
    if seq.frames.is_empty() {
        return Err(PlaybackError::Empty);
    }
    let findings = validate_sequence(&seq);
    if !findings.is_empty() {
        let list: Vec<String> = findings.iter().take(10).map(ToString::to_string).collect();
        return Err(PlaybackError::Invalid(list.join("; ")));
    }
    check_against_scene(&seq, scene)?;
    Ok(seq)
}

/// Indices `[skip, skip + keep)` clipped to `len`.
pub fn select_frames(len: usize, skip: usize, keep: Option<usize>) -> Range<usize> {
    let start = skip.min(len);
    let end = match keep {
        Some(k) => start.saturating_add(k).min(len),
        None => len,
    };
    if start == end {
        log::warn!("frame selection is empty (skip {skip} of {len})");
    }
    start..end
}

/// Scene posed exactly as recorded. Cameras missing from the record are
/// resolved from the recorded joints (attached) or their static pose.
pub fn apply_frame(scene: &Scene, frame: &FrameRecord) -> Result<SceneSnapshot, PlaybackError> {
    let missing =
        |kind, name: &str| PlaybackError::MissingEntity { frame: frame.frame_id, kind, name: name.to_string() };
    let objects = scene
        .objects
        .iter()
        .map(|o| {
            let r = frame.objects.iter().find(|r| r.name == o.name).ok_or_else(|| missing("object", &o.name))?;
            Ok(ObjectState { pose: r.pose(), aabb: Aabb::new(r.aabb_min, r.aabb_max) })
        })
        .collect::<Result<Vec<_>, PlaybackError>>()?;
    let joints = scene
        .robot
        .skeleton
        .joints()
        .iter()
        .enumerate()
        .map(|(i, j)| {
            // records list joints in skeleton order; fall back to a name search
            match frame.joints.get(i).filter(|r| r.name == j.name) {
                Some(r) => Ok(r.pose()),
                None => frame
                    .joints
                    .iter()
                    .find(|r| r.name == j.name)
                    .map(|r| r.pose())
                    .ok_or_else(|| missing("joint", &j.name)),
            }
        })
        .collect::<Result<Vec<Pose>, PlaybackError>>()?;
    let cameras = scene
        .cameras
        .iter()
        .map(|c| match frame.cameras.iter().find(|r| r.name == c.name) {
            Some(r) => Ok(r.pose()),
            None => {
                let socket = c.socket().and_then(|s| scene.robot.skeleton.socket_world_pose(&joints, s).ok());
                resolve_camera_pose(c, socket.as_ref(), None).map_err(|e| PlaybackError::Camera {
                    frame: frame.frame_id,
                    camera: c.name.clone(),
                    detail: e.to_string(),
                })
            }
        })
        .collect::<Result<Vec<Pose>, PlaybackError>>()?;
    Ok(SceneSnapshot { frame_id: frame.frame_id, timestamp_ms: frame.timestamp_ms, objects, joints, cameras })
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_index: usize,
    pub frame_id: u64,
    /// `None` for per-frame files such as annotations.
    pub camera: Option<String>,
    pub mode: String,
    /// Relative to the output directory, `/`-separated.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: String,
    pub skip: usize,
    pub keep: Option<usize>,
    pub depth_scale: f64,
    pub modes: Vec<String>,
    pub cameras: Vec<String>,
    pub frame_ids: Vec<u64>,
    pub files: Vec<ManifestEntry>,
}

pub fn frame_file_stem(index: usize) -> String {
    format!("{index:06}")
}

fn process_frame(
    scene: &Scene,
    frame: &FrameRecord,
    index: usize,
    opts: &PlaybackOptions,
) -> Result<Vec<ManifestEntry>, PlaybackError> {
    let posed = apply_frame(scene, frame)?;
    let geom = SceneGeometry::new(scene, &posed);
    let stem = frame_file_stem(index);
    let mut entries = Vec::new();
    let mut emit = |camera: Option<&str>, mode: Mode, rel: String, bytes: &[u8]| -> Result<(), PlaybackError> {
        write_atomic(&opts.output_dir.join(&rel), bytes)?;
        entries.push(ManifestEntry {
            frame_index: index,
            frame_id: frame.frame_id,
            camera: camera.map(str::to_string),
            mode: mode.as_str().to_string(),
            path: rel,
        });
        Ok(())
    };
    let mut views: Vec<(usize, RenderedViews)> = Vec::with_capacity(scene.cameras.len());
    for (ci, cam) in scene.cameras.iter().enumerate() {
        let v = render_view(&geom, &scene.lights, cam, &posed.cameras[ci], opts.depth_scale);
        for &mode in opts.modes.iter().filter(|m| m.is_image()) {
            let bytes = image_bytes(&v, mode).expect("image mode");
            emit(Some(&cam.name), mode, format!("{}/{}/{stem}.png", cam.name, mode.as_str()), &bytes)?;
        }
        if opts.modes.contains(&Mode::Pointcloud) {
            let pts = depth_to_pointcloud(&v, cam, &posed.cameras[ci], opts.depth_scale);
            emit(
                Some(&cam.name),
                Mode::Pointcloud,
                format!("pointcloud/{stem}_{}.ply", cam.name),
                ply_string(&pts).as_bytes(),
            )?;
        }
        views.push((ci, v));
    }
    if opts.modes.contains(&Mode::Annotations) {
        let refs: Vec<(usize, &RenderedViews)> = views.iter().map(|(i, v)| (*i, v)).collect();
        let ann = annotations_for_frame(scene, &posed, index, &refs);
        let text = serde_json::to_string_pretty(&ann).expect("annotations serialize") + "\n";
        emit(None, Mode::Annotations, format!("annotations/{stem}.json"), text.as_bytes())?;
    }
    Ok(entries)
}

/// Renders every selected frame for every camera and writes the manifest.
/// Output bytes do not depend on the worker count.
pub fn run_playback(seq: &Sequence, scene: &Scene, opts: &PlaybackOptions) -> Result<Manifest, PlaybackError> {
    opts.validate()?;
    let range = select_frames(seq.frames.len(), opts.skip, opts.keep);
    let selected: Vec<(usize, &FrameRecord)> = seq.frames[range].iter().enumerate().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| PlaybackError::Options(e.to_string()))?;
    let per_frame: Vec<Vec<ManifestEntry>> =
        pool.install(|| selected.par_iter().map(|&(i, f)| process_frame(scene, f, i, opts)).collect::<Result<_, _>>())?;
    let mut files: Vec<ManifestEntry> = per_frame.into_iter().flatten().collect();
    files.sort_by(|a, b| {
        (a.frame_index, &a.camera, &a.mode, &a.path).cmp(&(b.frame_index, &b.camera, &b.mode, &b.path))
    });
    let manifest = Manifest {
        scene: seq.meta.scene.clone(),
        skip: opts.skip,
        keep: opts.keep,
        depth_scale: opts.depth_scale,
        modes: opts.modes.iter().map(|m| m.as_str().to_string()).collect(),
        cameras: scene.cameras.iter().map(|c| c.name.clone()).collect(),
        frame_ids: selected.iter().map(|(_, f)| f.frame_id).collect(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&opts.output_dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn selection_examples() {
        assert_eq!(select_frames(100, 10, Some(50)), 10..60);
        assert_eq!(select_frames(100, 0, None), 0..100);
        assert!(select_frames(100, 100, None).is_empty());
        assert!(select_frames(100, 250, Some(3)).is_empty());
        assert_eq!(select_frames(5, 2, Some(usize::MAX)), 2..5);
    }

    proptest! {
        #[test]
        fn selection_size(n in 0usize..500, skip in 0usize..600, keep in proptest::option::of(1usize..600)) {
            let r = select_frames(n, skip, keep);
            let expect = keep.unwrap_or(usize::MAX).min(n.saturating_sub(skip));
            prop_assert_eq!(r.len(), expect);
            if !r.is_empty() {
                prop_assert_eq!(r.start, skip);
            }
        }
    }

    #[test]
    fn option_checks() {
        let mut o = PlaybackOptions::new("/tmp/x");
        assert!(o.validate().is_ok());
        o.modes.clear();
        assert!(o.validate().is_err());
        let mut o = PlaybackOptions::new("/tmp/x");
        o.workers = 0;
        assert!(o.validate().is_err());
    }
}
