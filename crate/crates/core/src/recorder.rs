//! Per-tick state logging: a raw line-oriented text log written by a
//! background thread, conversion into the structured JSON sequence, and
//! sequence validation.
//!
//! Raw format (UTF-8, LF, numbers with 6 decimals):
//!
//! ```text
//! # roxraw v1 tick_hz=30 units=m start=0 scene=assets/grasp_scene.json
//! frame 0 0
//! cam ext 1.000000 0.000000 1.200000 0.500000 -0.500000 0.500000 -0.500000
//! obj box 0.500000 0.000000 0.800000 1.000000 0.000000 0.000000 0.000000 0.475000 -0.025000 0.775000 0.525000 0.025000 0.825000
//! joint pelvis 0.000000 0.000000 0.900000 1.000000 0.000000 0.000000 0.000000
//! end
//! ```

use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Pose, Quat, Vec3};
use crate::scene::{Scene, SceneSnapshot};

pub const RAW_MAGIC: &str = "roxraw";
pub const RAW_VERSION: u32 = 1;
pub const SEQUENCE_FORMAT: &str = "roxseq";
pub const SEQUENCE_VERSION: u32 = 1;
/// Frames buffered between the tick and the writer thread.
pub const QUEUE_CAPACITY: usize = 1024;
/// Allowed deviation of a recorded quaternion's norm from 1.
pub const QUAT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("session already open")]
    SessionOpen,
    #[error("no session open")]
    NoSession,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("recording writer failed: {0}")]
    Writer(std::io::Error),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unterminated frame at line {0}")]
    Unterminated(usize),
    #[error("line {line}: unknown {kind} '{name}'")]
    UnknownEntity { line: usize, kind: &'static str, name: String },
    #[error("malformed sequence {path}: {detail}")]
    Schema { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub name: String,
    pub position: Vec3,
    pub rotation: Quat,
}

impl PoseRecord {
    pub fn pose(&self) -> Pose {
        Pose::new(self.position, self.rotation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub name: String,
    pub position: Vec3,
    pub rotation: Quat,
    pub aabb_min: Vec3,
    pub aabb_max: Vec3,
}

impl ObjectRecord {
    pub fn pose(&self) -> Pose {
        Pose::new(self.position, self.rotation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub timestamp_ms: u64,
    pub cameras: Vec<PoseRecord>,
    pub objects: Vec<ObjectRecord>,
    pub joints: Vec<PoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectMeta {
    pub name: String,
    pub instance_id: u16,
    pub class: String,
    pub class_id: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub format: String,
    pub version: u32,
    pub scene: String,
    pub units: String,
    pub tick_hz: u32,
    /// Wall-clock stamp copied from the raw header.
    pub start: String,
    pub cameras: Vec<String>,
    pub objects: Vec<ObjectMeta>,
    pub joints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sequence {
    pub meta: SequenceMeta,
    pub frames: Vec<FrameRecord>,
}

/// Entity names in scene order, shared by the tick and the converter.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityNames {
    pub cameras: Vec<String>,
    pub objects: Vec<String>,
    pub joints: Vec<String>,
}

impl EntityNames {
    pub fn of(scene: &Scene) -> EntityNames {
        EntityNames {
            cameras: scene.cameras.iter().map(|c| c.name.clone()).collect(),
            objects: scene.objects.iter().map(|o| o.name.clone()).collect(),
            joints: scene.robot.skeleton.joint_names().map(str::to_string).collect(),
        }
    }
}

/// `round(1000 * ticks / hz)` with halves rounded up, in integer arithmetic.
pub fn tick_timestamp_ms(ticks: u64, hz: u32) -> u64 {
    let hz = hz as u64;
    (2000 * ticks + hz) / (2 * hz)
}

impl FrameRecord {
    pub fn from_snapshot(names: &EntityNames, snap: &SceneSnapshot, frame_id: u64, timestamp_ms: u64) -> FrameRecord {
        let poses = |names: &[String], poses: &[Pose]| {
            names
                .iter()
                .zip(poses)
                .map(|(n, p)| PoseRecord { name: n.clone(), position: p.position, rotation: p.rotation })
                .collect()
        };
        FrameRecord {
            frame_id,
            timestamp_ms,
            cameras: poses(&names.cameras, &snap.cameras),
            objects: names
                .objects
                .iter()
                .zip(&snap.objects)
                .map(|(n, o)| ObjectRecord {
                    name: n.clone(),
                    position: o.pose.position,
                    rotation: o.pose.rotation,
                    aabb_min: o.aabb.min,
                    aabb_max: o.aabb.max,
                })
                .collect(),
            joints: poses(&names.joints, &snap.joints),
        }
    }
}

fn push_num(out: &mut String, x: f64) {
    let s = format!("{x:.6}");
    out.push(' ');
    // -0.000000 and 0.000000 parse to values that print differently
    out.push_str(if s == "-0.000000" { "0.000000" } else { &s });
}

fn push_pose(out: &mut String, p: Vec3, q: Quat) {
    for x in [p.x, p.y, p.z, q.w, q.x, q.y, q.z] {
        push_num(out, x);
    }
}

/// One frame block in the raw line format.
pub fn format_raw_frame(f: &FrameRecord) -> String {
    let mut out = String::with_capacity(64 * (2 + f.cameras.len() + f.objects.len() * 2 + f.joints.len()));
    let _ = writeln!(out, "frame {} {}", f.frame_id, f.timestamp_ms);
    for c in &f.cameras {
        out.push_str("cam ");
        out.push_str(&c.name);
        push_pose(&mut out, c.position, c.rotation);
        out.push('\n');
    }
    for o in &f.objects {
        out.push_str("obj ");
        out.push_str(&o.name);
        push_pose(&mut out, o.position, o.rotation);
        for x in [o.aabb_min.x, o.aabb_min.y, o.aabb_min.z, o.aabb_max.x, o.aabb_max.y, o.aabb_max.z] {
            push_num(&mut out, x);
        }
        out.push('\n');
    }
    for j in &f.joints {
        out.push_str("joint ");
        out.push_str(&j.name);
        push_pose(&mut out, j.position, j.rotation);
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawHeader {
    pub tick_hz: u32,
    pub units: String,
    /// Wall-clock stamp of the session start (free-form, no whitespace).
    pub start: String,
    pub scene: String,
}

impl RawHeader {
    pub fn line(&self) -> String {
        format!(
            "# {RAW_MAGIC} v{RAW_VERSION} tick_hz={} units={} start={} scene={}\n",
            self.tick_hz, self.units, self.start, self.scene
        )
    }

    fn parse(line: &str) -> Result<RawHeader, RecordError> {
        let bad = |detail: &str| RecordError::Parse { line: 1, detail: detail.to_string() };
        let rest = line
            .strip_prefix(&format!("# {RAW_MAGIC} v{RAW_VERSION} "))
            .ok_or_else(|| bad("missing or unsupported raw header"))?;
        let (fields, scene) = rest.split_once("scene=").ok_or_else(|| bad("header lacks scene="))?;
        let mut tick_hz = None;
        let mut units = None;
        let mut start = None;
        for kv in fields.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("header field without '='"))?;
            match k {
                "tick_hz" => tick_hz = Some(v.parse::<u32>().map_err(|_| bad("bad tick_hz"))?),
                "units" => units = Some(v.to_string()),
                "start" => start = Some(v.to_string()),
                _ => return Err(bad(&format!("unknown header field '{k}'"))),
            }
        }
        let tick_hz = tick_hz.filter(|&h| h > 0).ok_or_else(|| bad("header lacks tick_hz"))?;
        Ok(RawHeader {
            tick_hz,
            units: units.ok_or_else(|| bad("header lacks units"))?,
            start: start.ok_or_else(|| bad("header lacks start"))?,
            scene: scene.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionSummary {
    pub frames_written: u64,
    pub frames_dropped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Queued(u64),
    Dropped,
}

struct Session {
    tx: SyncSender<String>,
    writer: JoinHandle<std::io::Result<()>>,
    names: Arc<EntityNames>,
    hz: u32,
    origin_tick: u64,
    next_id: u64,
    dropped: u64,
}

/// Owns at most one recording session at a time.
#[derive(Default)]
pub struct Recorder {
    session: Option<Session>,
}

impl Recorder {
    pub fn new() -> Recorder {
        Recorder::default()
    }

    pub fn is_open(&self) -> bool {
        self.session.is_some()
    }

    /// Opens `path`, writes the header and starts the writer thread.
    /// Timestamps are measured from `origin_tick`.
    pub fn begin_session(
        &mut self,
        path: &Path,
        header: &RawHeader,
        names: Arc<EntityNames>,
        origin_tick: u64,
    ) -> Result<(), RecordError> {
        if self.session.is_some() {
            return Err(RecordError::SessionOpen);
        }
        let file = std::fs::File::create(path)
            .map_err(|source| RecordError::Io { path: path.display().to_string(), source })?;
        self.begin_with_writer(Box::new(file), header, names, origin_tick).map_err(|e| match e {
            RecordError::Writer(source) => RecordError::Io { path: path.display().to_string(), source },
            e => e,
        })
    }

    /// Like [`Recorder::begin_session`] but logging into any writer.
    pub fn begin_with_writer(
        &mut self,
        mut out: Box<dyn Write + Send>,
        header: &RawHeader,
        names: Arc<EntityNames>,
        origin_tick: u64,
    ) -> Result<(), RecordError> {
        if self.session.is_some() {
            return Err(RecordError::SessionOpen);
        }
        out.write_all(header.line().as_bytes()).and_then(|_| out.flush()).map_err(RecordError::Writer)?;
        let (tx, rx) = sync_channel::<String>(QUEUE_CAPACITY);
        let writer = std::thread::Builder::new()
            .name("roxraw-writer".into())
            .spawn(move || {
                let mut w = BufWriter::new(out);
                for block in rx {
                    w.write_all(block.as_bytes())?;
                }
                w.flush()
            })
            .map_err(RecordError::Writer)?;
        self.session = Some(Session { tx, writer, names, hz: header.tick_hz, origin_tick, next_id: 0, dropped: 0 });
        Ok(())
    }

    /// Hands one frame to the writer without waiting on the disk. The frame
    /// timestamp comes from `snap.frame_id` (the simulation tick).
    pub fn record_frame(&mut self, snap: &SceneSnapshot) -> Result<RecordOutcome, RecordError> {
        let s = self.session.as_mut().ok_or(RecordError::NoSession)?;
        let ts = tick_timestamp_ms(snap.frame_id.saturating_sub(s.origin_tick), s.hz);
        let rec = FrameRecord::from_snapshot(&s.names, snap, s.next_id, ts);
        match s.tx.try_send(format_raw_frame(&rec)) {
            Ok(()) => {
                s.next_id += 1;
                Ok(RecordOutcome::Queued(rec.frame_id))
            }
            Err(TrySendError::Full(_)) => {
                s.dropped += 1;
                log::warn!("recording queue full, dropped frame ({} so far)", s.dropped);
                Ok(RecordOutcome::Dropped)
            }
            Err(TrySendError::Disconnected(_)) => {
                // writer died; surface its error
                let s = self.session.take().expect("checked above");
                drop(s.tx);
                let err = match s.writer.join() {
                    Ok(Err(e)) => e,
                    _ => std::io::Error::other("writer thread stopped"),
                };
                Err(RecordError::Writer(err))
            }
        }
    }

    /// Flushes, closes the file and reports what was written and dropped.
    pub fn end_session(&mut self) -> Result<SessionSummary, RecordError> {
        let s = self.session.take().ok_or(RecordError::NoSession)?;
        drop(s.tx);
        match s.writer.join() {
            Ok(Ok(())) => Ok(SessionSummary { frames_written: s.next_id, frames_dropped: s.dropped }),
            Ok(Err(e)) => Err(RecordError::Writer(e)),
            Err(_) => Err(RecordError::Writer(std::io::Error::other("writer thread panicked"))),
        }
    }
}

impl Drop for Recorder {
    fn drop(&mut self) {
        if self.session.is_some() {
            if let Err(e) = self.end_session() {
                log::error!("closing recording: {e}");
            }
        }
    }
}

fn parse_f64s(line: usize, fields: &[&str], n: usize) -> Result<Vec<f64>, RecordError> {
    if fields.len() != n {
        return Err(RecordError::Parse { line, detail: format!("expected {n} numbers, found {}", fields.len()) });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| RecordError::Parse { line, detail: format!("bad number '{f}'") })
        })
        .collect()
}

fn pose_of(v: &[f64]) -> (Vec3, Quat) {
    (Vec3::new(v[0], v[1], v[2]), Quat::new(v[3], v[4], v[5], v[6]))
}

/// Parses raw log text, rejecting entities not listed in `names`.
pub fn parse_raw(raw: &str, names: &EntityNames) -> Result<(RawHeader, Vec<FrameRecord>), RecordError> {
    let mut lines = raw.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = match lines.next() {
        Some((_, l)) => RawHeader::parse(l)?,
        None => return Err(RecordError::Parse { line: 1, detail: "empty file".into() }),
    };
    let mut frames = Vec::new();
    let mut current: Option<(usize, FrameRecord)> = None;
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        let bad = |detail: String| RecordError::Parse { line: ln, detail };
        match (fields[0], current.as_mut()) {
            ("", None) if fields.len() == 1 => continue,
            ("frame", None) => {
                if fields.len() != 3 {
                    return Err(bad("expected 'frame <id> <ts_ms>'".into()));
                }
                let id = fields[1].parse().map_err(|_| bad(format!("bad frame id '{}'", fields[1])))?;
                let ts = fields[2].parse().map_err(|_| bad(format!("bad timestamp '{}'", fields[2])))?;
                current = Some((
                    ln,
                    FrameRecord { frame_id: id, timestamp_ms: ts, cameras: vec![], objects: vec![], joints: vec![] },
                ));
            }
            ("frame", Some((start, _))) => return Err(RecordError::Unterminated(*start)),
            ("end", Some(_)) if fields.len() == 1 => frames.push(current.take().expect("matched Some").1),
            (kind @ ("cam" | "obj" | "joint"), Some((_, f))) => {
                let name = fields.get(1).copied().unwrap_or_default();
                let (list, label) = match kind {
                    "cam" => (&names.cameras, "camera"),
                    "obj" => (&names.objects, "object"),
                    _ => (&names.joints, "joint"),
                };
                if !list.iter().any(|n| n == name) {
                    return Err(RecordError::UnknownEntity { line: ln, kind: label, name: name.to_string() });
                }
                let n = if kind == "obj" { 13 } else { 7 };
                let v = parse_f64s(ln, &fields[2..], n)?;
                let (position, rotation) = pose_of(&v);
                match kind {
                    "cam" => f.cameras.push(PoseRecord { name: name.into(), position, rotation }),
                    "joint" => f.joints.push(PoseRecord { name: name.into(), position, rotation }),
                    _ => f.objects.push(ObjectRecord {
                        name: name.into(),
                        position,
                        rotation,
                        aabb_min: Vec3::new(v[7], v[8], v[9]),
                        aabb_max: Vec3::new(v[10], v[11], v[12]),
                    }),
                }
            }
            (other, None) => return Err(bad(format!("unexpected '{other}' outside a frame"))),
            (other, Some(_)) => return Err(bad(format!("unexpected '{other}' inside a frame"))),
        }
    }
    if let Some((start, _)) = current {
        return Err(RecordError::Unterminated(start));
    }
    Ok((header, frames))
}

/// Parses raw log text into a sequence whose metadata comes from `scene`.
pub fn convert_raw_to_sequence(raw: &str, scene: &Scene) -> Result<Sequence, RecordError> {
    let (header, frames) = parse_raw(raw, &EntityNames::of(scene))?;
    Ok(Sequence { meta: sequence_meta(scene, &header), frames })
}

fn sequence_meta(scene: &Scene, header: &RawHeader) -> SequenceMeta {
    let names = EntityNames::of(scene);
    SequenceMeta {
        format: SEQUENCE_FORMAT.into(),
        version: SEQUENCE_VERSION,
        scene: header.scene.clone(),
        units: header.units.clone(),
        tick_hz: header.tick_hz,
        start: header.start.clone(),
        cameras: names.cameras,
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectMeta {
                name: o.name.clone(),
                instance_id: o.instance_id,
                class: o.class_name.clone(),
                class_id: o.class_id,
            })
            .collect(),
        joints: names.joints,
    }
}

pub fn convert_raw_file(raw_path: &Path, scene: &Scene) -> Result<Sequence, RecordError> {
    let text = std::fs::read_to_string(raw_path)
        .map_err(|source| RecordError::Io { path: raw_path.display().to_string(), source })?;
    convert_raw_to_sequence(&text, scene)
}

impl Sequence {
    /// Re-emits the raw log this sequence was converted from.
    pub fn to_raw(&self) -> String {
        let header = RawHeader {
            tick_hz: self.meta.tick_hz,
            units: self.meta.units.clone(),
            start: self.meta.start.clone(),
            scene: self.meta.scene.clone(),
        };
        let mut out = header.line();
        for f in &self.frames {
            out.push_str(&format_raw_frame(f));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sequence serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<(), RecordError> {
        std::fs::write(path, self.to_json())
            .map_err(|source| RecordError::Io { path: path.display().to_string(), source })
    }

    /// Reads a sequence file without checking it; see [`validate_sequence`].
    pub fn load(path: &Path) -> Result<Sequence, RecordError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| RecordError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text)
            .map_err(|e| RecordError::Schema { path: path.display().to_string(), detail: e.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub frame_id: Option<u64>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.frame_id {
            Some(id) => write!(f, "frame {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn check_names<'a>(
    out: &mut Vec<Violation>,
    frame: u64,
    kind: &str,
    declared: impl Iterator<Item = &'a str>,
    got: impl Iterator<Item = &'a str>,
) {
    if !declared.eq(got) {
        out.push(Violation { frame_id: Some(frame), message: format!("{kind} list differs from metadata") });
    }
}

fn check_quat(out: &mut Vec<Violation>, frame: u64, name: &str, q: Quat) {
    let n = q.norm();
    if !q.is_finite() || (n - 1.0).abs() > QUAT_NORM_TOLERANCE {
        out.push(Violation { frame_id: Some(frame), message: format!("'{name}' rotation norm {n:.6} is not unit") });
    }
}

fn check_vec(out: &mut Vec<Violation>, frame: u64, name: &str, v: Vec3) {
    if !v.is_finite() {
        out.push(Violation { frame_id: Some(frame), message: format!("'{name}' has non-finite values") });
    }
}

/// Every violated sequence invariant; empty for a valid sequence.
pub fn validate_sequence(seq: &Sequence) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = &seq.meta;
    let global = |out: &mut Vec<Violation>, message: String| out.push(Violation { frame_id: None, message });
    if m.format != SEQUENCE_FORMAT || m.version != SEQUENCE_VERSION {
        global(&mut out, format!("unsupported format {} v{}", m.format, m.version));
    }
    if m.units != "m" {
        global(&mut out, format!("unsupported units '{}'", m.units));
    }
    if m.tick_hz == 0 {
        global(&mut out, "tick_hz must be positive".into());
    }
    let mut prev: Option<&FrameRecord> = None;
    for f in &seq.frames {
        let id = f.frame_id;
        if let Some(p) = prev {
            if id <= p.frame_id {
                out.push(Violation {
                    frame_id: Some(id),
                    message: format!("frame id not increasing after {}", p.frame_id),
                });
            } else {
                for missing in p.frame_id + 1..id {
                    global(&mut out, format!("gap at {missing}"));
                }
            }
            if f.timestamp_ms < p.timestamp_ms {
                out.push(Violation { frame_id: Some(id), message: "timestamp decreases".into() });
            }
        }
        prev = Some(f);
        check_names(
            &mut out,
            id,
            "camera",
            m.cameras.iter().map(String::as_str),
            f.cameras.iter().map(|c| c.name.as_str()),
        );
        check_names(
            &mut out,
            id,
            "object",
            m.objects.iter().map(|o| o.name.as_str()),
            f.objects.iter().map(|o| o.name.as_str()),
        );
        check_names(
            &mut out,
            id,
            "joint",
            m.joints.iter().map(String::as_str),
            f.joints.iter().map(|j| j.name.as_str()),
        );
        for p in f.cameras.iter().chain(&f.joints) {
            check_vec(&mut out, id, &p.name, p.position);
            check_quat(&mut out, id, &p.name, p.rotation);
        }
        for o in &f.objects {
            check_vec(&mut out, id, &o.name, o.position);
            check_vec(&mut out, id, &o.name, o.aabb_min);
            check_vec(&mut out, id, &o.name, o.aabb_max);
            check_quat(&mut out, id, &o.name, o.rotation);
            let (a, b) = (o.aabb_min, o.aabb_max);
            if a.x > b.x || a.y > b.y || a.z > b.z {
                out.push(Violation { frame_id: Some(id), message: format!("'{}' box min exceeds max", o.name) });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Aabb;
    use crate::scene::ObjectState;

    fn names() -> Arc<EntityNames> {
        Arc::new(EntityNames {
            cameras: vec!["ext".into()],
            objects: vec!["box".into()],
            joints: vec!["root".into(), "head".into()],
        })
    }

    fn header() -> RawHeader {
        RawHeader { tick_hz: 30, units: "m".into(), start: "0".into(), scene: "scene.json".into() }
    }

    fn snap(tick: u64) -> SceneSnapshot {
        let t = tick as f64 * 0.01;
        SceneSnapshot {
            frame_id: tick,
            timestamp_ms: 0,
            objects: vec![ObjectState {
                pose: Pose::new(Vec3::new(0.5 + t, 0.0, 0.05), Quat::rot_z(t)),
                aabb: Aabb::new(Vec3::new(0.45, -0.05, 0.0), Vec3::new(0.55, 0.05, 0.1)),
            }],
            joints: vec![Pose::IDENTITY, Pose::new(Vec3::new(0.0, 0.0, 1.5), Quat::rot_x(-t))],
            cameras: vec![Pose::look_at(Vec3::new(1.0, 1.0, 1.0), Vec3::ZERO, Vec3::Z)],
        }
    }

    /// Writer that shares its bytes with the test.
    #[derive(Clone, Default)]
    struct Shared(Arc<std::sync::Mutex<Vec<u8>>>);

    impl Write for Shared {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn timestamps_at_thirty_hz() {
        assert_eq!(tick_timestamp_ms(3, 30), 100);
        assert_eq!(tick_timestamp_ms(1, 30), 33);
        assert_eq!(tick_timestamp_ms(2, 30), 67);
        for k in 0..10_000u64 {
            assert_eq!(tick_timestamp_ms(k, 30), (1000.0 * k as f64 / 30.0).round() as u64);
        }
    }

    #[test]
    fn block_line_counts() {
        let rec = FrameRecord::from_snapshot(&names(), &snap(0), 0, 0);
        let text = format_raw_frame(&rec);
        let kinds: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
        assert_eq!(kinds, ["frame", "cam", "obj", "joint", "joint", "end"]);
    }

    #[test]
    fn session_lifecycle() {
        let buf = Shared::default();
        let mut r = Recorder::new();
        r.begin_with_writer(Box::new(buf.clone()), &header(), names(), 5).unwrap();
        assert!(matches!(
            r.begin_with_writer(Box::new(buf.clone()), &header(), names(), 0),
            Err(RecordError::SessionOpen)
        ));
        for k in 0..10 {
            assert_eq!(r.record_frame(&snap(5 + k)).unwrap(), RecordOutcome::Queued(k));
        }
        assert_eq!(r.end_session().unwrap(), SessionSummary { frames_written: 10, frames_dropped: 0 });
        assert!(matches!(r.end_session(), Err(RecordError::NoSession)));
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert!(text.starts_with("# roxraw v1 tick_hz=30 units=m start=0 scene=scene.json\n"));
        assert!(text.contains("frame 3 100\n"));
        assert_eq!(text.matches("\nend\n").count(), 10);
    }

    #[test]
    fn empty_session_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.raw");
        let mut r = Recorder::new();
        r.begin_session(&p, &header(), names(), 0).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("# roxraw"));
        assert_eq!(r.end_session().unwrap(), SessionSummary { frames_written: 0, frames_dropped: 0 });
        assert_eq!(std::fs::read_to_string(&p).unwrap(), header().line());
    }

    #[test]
    fn unwritable_path_fails() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing-dir").join("x.raw");
        assert!(matches!(Recorder::new().begin_session(&p, &header(), names(), 0), Err(RecordError::Io { .. })));
    }

    struct Slow(Shared);

    impl Write for Slow {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            std::thread::sleep(std::time::Duration::from_millis(2));
            self.0.write(b)
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn slow_disk_does_not_block_the_tick() {
        let buf = Shared::default();
        let mut r = Recorder::new();
        r.begin_with_writer(Box::new(Slow(buf.clone())), &header(), names(), 0).unwrap();
        let mut worst = std::time::Duration::ZERO;
        for k in 0..200 {
            let t = std::time::Instant::now();
            r.record_frame(&snap(k)).unwrap();
            worst = worst.max(t.elapsed());
        }
        assert!(worst < std::time::Duration::from_millis(1), "worst hand-off {worst:?}");
        let s = r.end_session().unwrap();
        assert_eq!(s.frames_written + s.frames_dropped, 200);
    }

    #[test]
    fn overflow_drops_and_counts() {
        struct Stuck(std::sync::mpsc::Receiver<()>);
        impl Write for Stuck {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                let _ = self.0.recv();
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let (gate, rx) = std::sync::mpsc::channel();
        let mut r = Recorder::new();
        // the header goes through before the gate closes
        gate.send(()).unwrap();
        gate.send(()).unwrap();
        r.begin_with_writer(Box::new(Stuck(rx)), &header(), names(), 0).unwrap();
        let n = QUEUE_CAPACITY as u64 + 50;
        let mut dropped = 0;
        for k in 0..n {
            if r.record_frame(&snap(k)).unwrap() == RecordOutcome::Dropped {
                dropped += 1;
            }
        }
        assert!(dropped > 0);
        drop(gate);
        let s = r.end_session().unwrap();
        assert_eq!(s.frames_dropped, dropped);
        assert_eq!(s.frames_written + s.frames_dropped, n);
    }

    fn seq_with_ids(ids: &[u64]) -> Sequence {
        let n = names();
        Sequence {
            meta: SequenceMeta {
                format: SEQUENCE_FORMAT.into(),
                version: SEQUENCE_VERSION,
                scene: "s".into(),
                units: "m".into(),
                tick_hz: 30,
                start: "0".into(),
                cameras: n.cameras.clone(),
                objects: vec![ObjectMeta { name: "box".into(), instance_id: 1, class: "box".into(), class_id: 1 }],
                joints: n.joints.clone(),
            },
            frames: ids
                .iter()
                .map(|&i| FrameRecord::from_snapshot(&n, &snap(i), i, tick_timestamp_ms(i, 30)))
                .collect(),
        }
    }

    #[test]
    fn validation_findings() {
        assert!(validate_sequence(&seq_with_ids(&[0, 1, 2])).is_empty());
        let v = validate_sequence(&seq_with_ids(&[0, 2]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "gap at 1");

        let mut s = seq_with_ids(&[0, 1]);
        s.frames[1].joints[0].rotation = Quat::new(0.9, 0.0, 0.0, 0.0);
        let v = validate_sequence(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].frame_id, Some(1));

        let mut s = seq_with_ids(&[0]);
        s.frames[0].objects.clear();
        assert_eq!(validate_sequence(&s).len(), 1);
    }

    #[test]
    fn raw_round_trip_is_a_fixed_point() {
        let s = seq_with_ids(&[0, 1, 2, 3]);
        let raw = s.to_raw();
        let (_, frames) = parse_raw(&raw, &names()).unwrap();
        let parsed = Sequence { meta: s.meta.clone(), frames };
        assert_eq!(parsed.to_raw(), raw);
        for (a, b) in s.frames.iter().zip(&parsed.frames) {
            assert_eq!(a.frame_id, b.frame_id);
            assert_eq!(a.timestamp_ms, b.timestamp_ms);
            assert!(a.objects[0].pose().max_abs_diff(&b.objects[0].pose()) <= 5e-7);
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let raw = seq_with_ids(&[0, 1]).to_raw();
        let truncated: String = raw.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert_eq!(parse_raw(&truncated, &names()).unwrap_err().to_string(), "unterminated frame at line 8");
        let unknown = raw.replacen("obj box", "obj crate", 1);
        assert_eq!(parse_raw(&unknown, &names()).unwrap_err().to_string(), "line 4: unknown object 'crate'");
        let garbled = raw.replacen("joint head 0.000000", "joint head zero", 1);
        assert!(parse_raw(&garbled, &names()).unwrap_err().to_string().starts_with("line 6:"));
    }

    #[test]
    fn header_parse() {
        let h = RawHeader { tick_hz: 60, units: "m".into(), start: "1700000000".into(), scene: "my scene.json".into() };
        assert_eq!(RawHeader::parse(h.line().trim_end()).unwrap(), h);
        assert!(RawHeader::parse("# roxraw v2 tick_hz=30 units=m start=0 scene=x").is_err());
    }
}
