//! Fixed-rate simulation loop: commands, arm IK, finger closing, grasping,
//! recording and the operator HUD.

pub mod hud;
pub mod protocol;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine as _;
use serde::Deserialize;
use thiserror::Error;

use crate::grasp::{BallisticDrop, ContactWorld, GraspDecision, HandState};
use crate::math::{Pose, Vec3};
use crate::mesh::Aabb;
use crate::recorder::{tick_timestamp_ms, EntityNames, RawHeader, RecordError, Recorder, SessionSummary};
use crate::render::{png_rgb8, render_view, SceneGeometry, DEFAULT_DEPTH_SCALE};
use crate::robot::hand::apply_finger;
use crate::scene::{ObjectState, Scene, SceneSnapshot};
use crate::schema::Side;

pub use hud::{Hud, HudEntry, HudLevel, HudMessage};
pub use protocol::{handle_command, Command, Grasped, ProtocolError, ServerMessage};

pub const DEFAULT_TICK_HZ: u32 = 30;
/// A preview frame is produced every this many ticks.
pub const PREVIEW_DECIMATION: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub tick_hz: u32,
    /// Where operator-toggled recordings go; toggling is refused without it.
    pub record_dir: Option<PathBuf>,
    /// Header start stamp; `None` uses the wall clock (Unix seconds).
    pub start_stamp: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { tick_hz: DEFAULT_TICK_HZ, record_dir: None, start_stamp: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    Attached { side: Side, object: String },
    Released { side: Side, object: String },
    Landed { object: String },
    RecordingStarted(PathBuf),
    RecordingStopped(SessionSummary),
    Error(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Motion {
    Resting,
    Held(Side),
    Falling { drop: BallisticDrop, since_tick: u64 },
}

#[derive(Debug, Clone)]
struct Dynamic {
    locals: Vec<Pose>,
    base: Pose,
    velocity: (f64, f64, f64),
    goals: [Option<Pose>; 2],
    hands: [Option<HandState>; 2],
    motion: Vec<Motion>,
    object_poses: Vec<Pose>,
    prev_wrist: [Option<Vec3>; 2],
}

fn slot(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

pub struct SimState {
    scene: Arc<Scene>,
    contacts: ContactWorld,
    names: Arc<EntityNames>,
    config: SimConfig,
    tick: u64,
    dynamic: Dynamic,
    initial: Dynamic,
    initial_cameras: Vec<Pose>,
    snapshot: SceneSnapshot,
    recorder: Recorder,
    sessions: u32,
    hud: Hud,
    camera: usize,
}

impl SimState {
    pub fn new(scene: Arc<Scene>, config: SimConfig) -> SimState {
        let snap = scene.initial_snapshot();
        let robot = &scene.robot;
        let dynamic = Dynamic {
            locals: robot.rest_locals(),
            base: scene.robot_pose,
            velocity: (0.0, 0.0, 0.0),
            goals: [None, None],
            hands: Side::BOTH.map(|s| robot.hand(s).map(|h| HandState::new(s, h.fingers.len()))),
            motion: vec![Motion::Resting; scene.objects.len()],
            object_poses: scene.objects.iter().map(|o| o.pose).collect(),
            prev_wrist: [None, None],
        };
        SimState {
            contacts: ContactWorld::new(&scene),
            names: Arc::new(EntityNames::of(&scene)),
            config,
            tick: 0,
            initial: dynamic.clone(),
            dynamic,
            initial_cameras: snap.cameras.clone(),
            snapshot: snap,
            recorder: Recorder::new(),
            sessions: 0,
            hud: Hud::new(),
            camera: 0,
            scene,
        }
    }

    pub fn scene(&self) -> &Arc<Scene> {
        &self.scene
    }

    /// Index of the next tick to run.
    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn hz(&self) -> f64 {
        self.config.tick_hz as f64
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 / self.hz()
    }

    /// State after the last tick.
    pub fn snapshot(&self) -> &SceneSnapshot {
        &self.snapshot
    }

    pub fn hud(&self) -> &Hud {
        &self.hud
    }

    pub fn hud_mut(&mut self) -> &mut Hud {
        &mut self.hud
    }

    pub fn recording(&self) -> bool {
        self.recorder.is_open()
    }

    pub fn hand(&self, side: Side) -> Option<&HandState> {
        self.dynamic.hands[slot(side)].as_ref()
    }

    pub fn camera_name(&self) -> &str {
        &self.scene.cameras[self.camera].name
    }

    pub fn base_pose(&self) -> Pose {
        self.dynamic.base
    }

    /// World pose of a hand's wrist in the last snapshot.
    pub fn wrist_pose(&self, side: Side) -> Option<Pose> {
        self.scene.robot.hand(side).map(|h| self.snapshot.joints[h.wrist])
    }

    pub fn start_recording(&mut self, path: &Path) -> Result<(), RecordError> {
        let header = RawHeader {
            tick_hz: self.config.tick_hz,
            units: self.scene.units.clone(),
            start: self.config.start_stamp.clone().unwrap_or_else(|| {
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                secs.to_string()
            }),
            scene: self.scene.source.clone(),
        };
        self.recorder.begin_session(path, &header, self.names.clone(), self.tick)?;
        self.hud.set_recording(true, self.time());
        Ok(())
    }

    pub fn stop_recording(&mut self) -> Result<SessionSummary, RecordError> {
        let r = self.recorder.end_session();
        self.hud.set_recording(false, self.time());
        r
    }

    fn toggle_record(&mut self, now: f64, events: &mut Vec<SimEvent>) {
        if self.recording() {
            match self.stop_recording() {
                Ok(s) => {
                    let mut text = format!("recording stopped: {} frames", s.frames_written);
                    if s.frames_dropped > 0 {
                        text += &format!(", {} dropped", s.frames_dropped);
                    }
                    self.hud.push(HudLevel::State, text, now);
                    events.push(SimEvent::RecordingStopped(s));
                }
                Err(e) => self.error(e.to_string(), now, events),
            }
            return;
        }
        let Some(dir) = self.config.record_dir.clone() else {
            self.error("cannot record: no output directory configured".into(), now, events);
            return;
        };
        self.sessions += 1;
        let path = dir.join(format!("session_{:03}.log", self.sessions));
        match self.start_recording(&path) {
            Ok(()) => {
                self.hud.push(HudLevel::State, format!("recording to {}", path.display()), now);
                events.push(SimEvent::RecordingStarted(path));
            }
            Err(e) => self.error(e.to_string(), now, events),
        }
    }

    fn error(&mut self, text: String, now: f64, events: &mut Vec<SimEvent>) {
        log::warn!("{text}");
        self.hud.push(HudLevel::Error, text.clone(), now);
        events.push(SimEvent::Error(text));
    }

    fn apply_command(&mut self, cmd: &Command, now: f64, events: &mut Vec<SimEvent>) {
        match cmd {
            Command::Move { dx, dy, dyaw } => self.dynamic.velocity = (*dx, *dy, *dyaw),
            Command::HandTarget { side, position, rotation } => {
                if self.scene.robot.arm(*side).is_none() {
                    self.error(format!("robot has no {side} arm"), now, events);
                    return;
                }
                let rotation =
                    rotation.or_else(|| self.dynamic.goals[slot(*side)].map(|g| g.rotation)).unwrap_or_else(|| {
                        let wrist = self.wrist_pose(*side).expect("arm implies wrist joint");
                        self.dynamic.base.rotation.conjugate() * wrist.rotation
                    });
                self.dynamic.goals[slot(*side)] = Some(Pose::new(*position, rotation));
            }
            Command::Grip { side, value } => match self.dynamic.hands[slot(*side)].as_mut() {
                Some(h) => h.grip_input = value.clamp(0.0, 1.0),
                None => self.error(format!("robot has no {side} hand"), now, events),
            },
            Command::ToggleRecord => self.toggle_record(now, events),
            Command::Reset => {
                self.dynamic = self.initial.clone();
                self.hud.push(HudLevel::State, "scene reset", now);
            }
            Command::SelectCamera(name) => match self.scene.camera_index(name) {
                Some(i) => {
                    self.camera = i;
                    self.hud.push(HudLevel::State, format!("camera: {name}"), now);
                }
                None => self.error(format!("unknown camera '{name}'"), now, events),
            },
            Command::Noop => {}
        }
    }

    fn current_objects(&self) -> SceneSnapshot {
        SceneSnapshot {
            frame_id: self.tick,
            timestamp_ms: 0,
            objects: self
                .scene
                .objects
                .iter()
                .zip(&self.dynamic.object_poses)
                .map(|(o, p)| ObjectState { pose: *p, aabb: o.world_aabb(p) })
                .collect(),
            joints: Vec::new(),
            cameras: Vec::new(),
        }
    }

    /// Advances one tick, applying `commands` in order first.
    pub fn tick(&mut self, commands: &[Command]) -> Vec<SimEvent> {
        let mut events = Vec::new();
        let now = self.time();
        let hz = self.hz();
        let dt = 1.0 / hz;
        let scene = self.scene.clone();
        let robot = &scene.robot;

        // 1. commands, base motion, arm IK
        for c in commands {
            self.apply_command(c, now, &mut events);
        }
        let (dx, dy, dyaw) = self.dynamic.velocity;
        if dx != 0.0 || dy != 0.0 || dyaw != 0.0 {
            let step = Pose::new(Vec3::new(dx * dt, dy * dt, 0.0), crate::math::Quat::rot_z(dyaw * dt));
            self.dynamic.base = self.dynamic.base.compose(&step);
        }
        for side in Side::BOTH {
            if let Some(goal) = self.dynamic.goals[slot(side)] {
                let world_goal = self.dynamic.base.compose(&goal);
                let base = self.dynamic.base;
                robot.solve_arm(&mut self.dynamic.locals, &base, side, &world_goal);
            }
        }

        // 2. forward kinematics
        let joints = robot.skeleton.forward_kinematics_indexed(&self.dynamic.base, &self.dynamic.locals);

        // 3. triggers and contacts
        let objects_now = self.current_objects();
        let mut contacts = [Vec::new(), Vec::new()];
        for hand in &robot.hands {
            let triggers = crate::grasp::update_triggers(hand, &joints).expect("FK covers every joint");
            contacts[slot(hand.side)] = self.contacts.detect_contacts(hand, &triggers, &scene, &objects_now);
        }

        // 4. finger closing
        for hand in &robot.hands {
            let Some(state) = self.dynamic.hands[slot(hand.side)].as_mut() else { continue };
            let locals = &self.dynamic.locals;
            let base = self.dynamic.base;
            let cw = &self.contacts;
            let grip = state.grip_input;
            state.step_fingers(grip, dt, |fi, extent| {
                let finger = &hand.fingers[fi];
                let mut l = locals.clone();
                apply_finger(&mut l, finger, extent);
                let w = robot.skeleton.forward_kinematics_indexed(&base, &l);
                let spheres: Vec<(Vec3, f64)> =
                    finger.phalanges.iter().map(|p| (w[p.joint].position, p.radius)).collect();
                cw.any_contact(&spheres, &objects_now)
            });
            for (f, &e) in hand.fingers.iter().zip(&state.extents) {
                apply_finger(&mut self.dynamic.locals, f, e);
            }
        }

        // 5. grasp decisions, left then right
        for hand in &robot.hands {
            let side = hand.side;
            let other =
                self.dynamic.hands[slot(side.other())].as_ref().and_then(|h| h.grasped_object()).map(str::to_string);
            let usable: Vec<_> =
                contacts[slot(side)].iter().filter(|c| Some(&c.object) != other.as_ref()).cloned().collect();
            let wrist = joints[hand.wrist];
            let Some(state) = self.dynamic.hands[slot(side)].as_mut() else { continue };
            match state.evaluate_grasp(hand, &usable) {
                GraspDecision::Attach(name) => {
                    let oi = scene.object_index(&name).expect("contacts name scene objects");
                    state.attach(&name, &wrist, &self.dynamic.object_poses[oi]);
                    self.dynamic.motion[oi] = Motion::Held(side);
                    self.hud.push(HudLevel::State, format!("{side} hand grasped {name}"), now);
                    events.push(SimEvent::Attached { side, object: name });
                }
                GraspDecision::Release => {
                    let g = state.release().expect("release implies a grasp");
                    let oi = scene.object_index(&g.object).expect("grasped objects exist");
                    let velocity = match self.dynamic.prev_wrist[slot(side)] {
                        Some(p) => (wrist.position - p) * hz,
                        None => Vec3::ZERO,
                    };
                    let pose = self.dynamic.object_poses[oi];
                    let supports: Vec<Aabb> = scene
                        .objects
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != oi && self.dynamic.motion[i] == Motion::Resting)
                        .map(|(i, o)| o.world_aabb(&self.dynamic.object_poses[i]))
                        .collect();
                    let drop = BallisticDrop::new(pose, &scene.objects[oi].world_aabb(&pose), velocity, &supports);
                    self.dynamic.motion[oi] = Motion::Falling { drop, since_tick: self.tick };
                    self.hud.push(HudLevel::State, format!("{side} hand released {}", g.object), now);
                    events.push(SimEvent::Released { side, object: g.object });
                }
                GraspDecision::Hold | GraspDecision::None => {}
            }
        }

        // 6. snapshot: final FK with the new finger poses, carried and falling objects
        let joints = robot.skeleton.forward_kinematics_indexed(&self.dynamic.base, &self.dynamic.locals);
        for (oi, o) in scene.objects.iter().enumerate() {
            match &self.dynamic.motion[oi] {
                Motion::Held(side) => {
                    let hand = robot.hand(*side).expect("held by an existing hand");
                    let state = self.dynamic.hands[slot(*side)].as_ref().expect("hand state");
                    if let Some(p) = state.apply_attachment(&joints[hand.wrist]) {
                        self.dynamic.object_poses[oi] = p;
                    }
                }
                Motion::Falling { drop, since_tick } => {
                    let t = (self.tick - since_tick) as f64 * dt;
                    self.dynamic.object_poses[oi] = drop.pose_at(t);
                    if drop.landed(t) {
                        self.dynamic.motion[oi] = Motion::Resting;
                        events.push(SimEvent::Landed { object: o.name.clone() });
                    }
                }
                Motion::Resting => {}
            }
        }
        for hand in &robot.hands {
            self.dynamic.prev_wrist[slot(hand.side)] = Some(joints[hand.wrist].position);
        }
        let cameras = scene.resolve_cameras(&joints, Some(&self.initial_cameras)).expect("sockets validated at load");
        let mut snap = self.current_objects();
        snap.timestamp_ms = tick_timestamp_ms(self.tick, self.config.tick_hz);
        snap.joints = joints;
        snap.cameras = cameras;
        self.snapshot = snap;

        // 7. recording
        if self.recorder.is_open() {
            if let Err(e) = self.recorder.record_frame(&self.snapshot) {
                self.hud.set_recording(false, now);
                self.error(e.to_string(), now, &mut events);
            }
        }

        // 8. HUD
        self.hud.expire(now);
        self.tick += 1;
        events
    }

    pub fn grasped(&self) -> Grasped {
        let name = |s: Side| self.hand(s).and_then(|h| h.grasped_object()).map(str::to_string);
        Grasped { left: name(Side::Left), right: name(Side::Right) }
    }

    pub fn state_message(&self) -> ServerMessage {
        // the HUD was last expired at the time of the tick just run
        let now = self.tick.saturating_sub(1) as f64 / self.hz();
        ServerMessage::State {
            tick: self.snapshot.frame_id,
            recording: self.recording(),
            camera: self.camera_name().to_string(),
            grasped: self.grasped(),
            hud: self.hud.entries(now),
        }
    }

    /// Preview frame of the selected camera, on every [`PREVIEW_DECIMATION`]th tick.
    pub fn preview(&self) -> Option<ServerMessage> {
        self.snapshot
            .frame_id
            .is_multiple_of(PREVIEW_DECIMATION)
            .then(|| encode_preview(&self.scene, &self.snapshot, self.camera))
    }
}

/// Renders one camera's RGB view and wraps it as a base64 PNG frame message.
pub fn encode_preview(scene: &Scene, snap: &SceneSnapshot, camera: usize) -> ServerMessage {
    let cam = &scene.cameras[camera];
    let geom = SceneGeometry::new(scene, snap);
    let v = render_view(&geom, &scene.lights, cam, &snap.cameras[camera], DEFAULT_DEPTH_SCALE);
    let png = png_rgb8(v.width, v.height, &v.rgb);
    ServerMessage::Frame {
        camera: cam.name.clone(),
        tick: snap.frame_id,
        encoding: "png-base64".into(),
        data: base64::engine::general_purpose::STANDARD.encode(png),
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed script: {0}")]
    Schema(String),
    #[error("script entry {index}: {source}")]
    Command {
        index: usize,
        #[source]
        source: ProtocolError,
    },
    #[error("script ticks must be non-decreasing (entry {0})")]
    Order(usize),
    #[error(transparent)]
    Record(#[from] RecordError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    ticks: Option<u64>,
    commands: Vec<ScriptEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptEntry {
    tick: u64,
    command: serde_json::Value,
}

/// Ticks run after the last scripted command when the script gives no length.
pub const SCRIPT_GRACE_TICKS: u64 = 30;

/// Timed commands standing in for a live operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub ticks: u64,
    pub entries: Vec<(u64, Command)>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let f: ScriptFile = serde_json::from_str(text).map_err(|e| ScriptError::Schema(e.to_string()))?;
        let mut entries = Vec::with_capacity(f.commands.len());
        for (index, e) in f.commands.into_iter().enumerate() {
            if entries.last().is_some_and(|&(t, _)| e.tick < t) {
                return Err(ScriptError::Order(index));
            }
            let (cmd, _) =
                protocol::command_from_value(e.command).map_err(|source| ScriptError::Command { index, source })?;
            entries.push((e.tick, cmd));
        }
        let last = entries.last().map_or(0, |&(t, _)| t + 1);
        Ok(Script { ticks: f.ticks.unwrap_or(last + SCRIPT_GRACE_TICKS).max(last), entries })
    }

    pub fn load(path: &Path) -> Result<Script, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
        Script::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptRun {
    pub events: Vec<(u64, SimEvent)>,
    pub summary: Option<SessionSummary>,
}

/// Runs `script` from the current tick, recording every tick to `raw` if given.
pub fn run_script(state: &mut SimState, script: &Script, raw: Option<&Path>) -> Result<ScriptRun, ScriptError> {
    if let Some(p) = raw {
        state.start_recording(p)?;
    }
    let mut events = Vec::new();
    let mut next = 0;
    for t in 0..script.ticks {
        let start = next;
        while next < script.entries.len() && script.entries[next].0 == t {
            next += 1;
        }
        let cmds: Vec<Command> = script.entries[start..next].iter().map(|(_, c)| c.clone()).collect();
        let tick = state.tick_count();
        events.extend(state.tick(&cmds).into_iter().map(|e| (tick, e)));
    }
    let summary = if raw.is_some() { Some(state.stop_recording()?) } else { None };
    Ok(ScriptRun { events, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn script_parsing() {
        let s = Script::parse(
            r#"{"commands": [{"tick": 0, "command": {"type": "grip", "side": "right", "value": 1}},
                             {"tick": 4, "command": {"type": "reset"}}]}"#,
        )
        .unwrap();
        assert_eq!(s.ticks, 5 + SCRIPT_GRACE_TICKS);
        assert_eq!(s.entries[1], (4, Command::Reset));
        let s = Script::parse(r#"{"ticks": 10, "commands": []}"#).unwrap();
        assert_eq!(s.ticks, 10);
        assert!(matches!(
            Script::parse(
                r#"{"commands": [{"tick": 3, "command": {"type": "reset"}}, {"tick": 1, "command": {"type": "reset"}}]}"#
            ),
            Err(ScriptError::Order(1))
        ));
        assert!(matches!(
            Script::parse(r#"{"commands": [{"tick": 0, "command": {"type": "grip"}}]}"#),
            Err(ScriptError::Command { index: 0, .. })
        ));
    }
}
