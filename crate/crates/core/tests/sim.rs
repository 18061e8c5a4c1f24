use std::path::PathBuf;
use std::sync::Arc;

use base64::Engine;
use roxsim_core::math::Pose;
use roxsim_core::recorder::{convert_raw_to_sequence, validate_sequence};
use roxsim_core::render::{render_view, SceneGeometry, DEFAULT_DEPTH_SCALE};
use roxsim_core::scene::Scene;
use roxsim_core::schema::Side;
use roxsim_core::sim::hud::{HudLevel, ERROR_TTL_S};
use roxsim_core::sim::protocol::{handle_command, Command, ServerMessage};
use roxsim_core::sim::{run_script, Script, SimConfig, SimEvent, SimState, PREVIEW_DECIMATION};

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn scene() -> Arc<Scene> {
    Arc::new(Scene::load(&assets().join("scenes/grasp_table.json")).unwrap())
}

fn fixed() -> SimConfig {
    SimConfig { start_stamp: Some("0".into()), ..SimConfig::default() }
}

fn commands_at(script: &Script, t: u64) -> Vec<Command> {
    script.entries.iter().filter(|(k, _)| *k == t).map(|(_, c)| c.clone()).collect()
}

fn rel(a: &Pose, b: &Pose) -> Pose {
    a.inverse().compose(b)
}

#[test]
fn scripted_grasp_holds_rigidly_then_drops_onto_table() {
    let scene = scene();
    let bi = scene.object_index("box").unwrap();
    let mut s = SimState::new(scene.clone(), fixed());
    let script = Script::load(&assets().join("scripts/grasp_box.json")).unwrap();
    let mut held_offset: Option<Pose> = None;
    let (mut attached, mut released, mut landed) = (None, None, None);
    for t in 0..script.ticks {
        for e in s.tick(&commands_at(&script, t)) {
            match e {
                SimEvent::Attached { side: Side::Right, ref object } if object == "box" => attached = Some(t),
                SimEvent::Released { side: Side::Right, ref object } if object == "box" => released = Some(t),
                SimEvent::Landed { ref object } if object == "box" => landed = Some(t),
                other => panic!("unexpected event {other:?}"),
            }
        }
        let wrist = s.wrist_pose(Side::Right).unwrap();
        let obj = s.snapshot().objects[bi].pose;
        if attached.is_some() && released.is_none() {
            let r = rel(&wrist, &obj);
            match held_offset {
                None => held_offset = Some(r),
                Some(h) => {
                    assert!((r.position - h.position).norm() < 1e-9, "tick {t} {r:?} {h:?}");
                    assert!(r.rotation.angle_to(h.rotation) < 1e-9, "tick {t}");
                }
            }
        }
    }
    let (a, r, l) = (attached.unwrap(), released.unwrap(), landed.unwrap());
    assert!(a < r && r < l);
    // the box was carried upward and sideways before release
    let end = s.snapshot().objects[bi];
    let start = scene.objects[bi].pose;
    assert!((end.pose.position.y - start.position.y).abs() > 0.1);
    // resting on the table top
    assert!((end.aabb.min.z - 0.775).abs() < 1e-9, "{:?}", end.aabb);
    assert_eq!(s.grasped().right, None);
}

#[test]
fn recording_a_script_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let script = Script::load(&assets().join("scripts/grasp_box.json")).unwrap();
    let mut raws = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("run{i}.log"));
        let mut s = SimState::new(scene(), fixed());
        let run = run_script(&mut s, &script, Some(&path)).unwrap();
        let summary = run.summary.unwrap();
        assert_eq!(summary.frames_written, script.ticks);
        assert_eq!(summary.frames_dropped, 0);
        raws.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(raws[0], raws[1]);
    let seq = convert_raw_to_sequence(std::str::from_utf8(&raws[0]).unwrap(), &scene()).unwrap();
    assert_eq!(seq.frames.len() as u64, script.ticks);
    assert!(validate_sequence(&seq).is_empty());
    assert_eq!(seq.frames[0].timestamp_ms, 0);
    assert_eq!(seq.frames[3].timestamp_ms, 100);
}

#[test]
fn preview_matches_direct_render() {
    let scene = scene();
    let mut s = SimState::new(scene.clone(), fixed());
    let mut previews = 0;
    for t in 0..7u64 {
        s.tick(&[]);
        let Some(ServerMessage::Frame { camera, tick, encoding, data }) = s.preview() else {
            assert_ne!(t % PREVIEW_DECIMATION, 0);
            continue;
        };
        previews += 1;
        assert_eq!(tick, t);
        assert_eq!(camera, "external");
        assert_eq!(encoding, "png-base64");
        let bytes = base64::engine::general_purpose::STANDARD.decode(data).unwrap();
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (320, 240));
        assert_eq!(info.color_type, png::ColorType::Rgb);
        let geom = SceneGeometry::new(&scene, s.snapshot());
        let direct =
            render_view(&geom, &scene.lights, &scene.cameras[0], &s.snapshot().cameras[0], DEFAULT_DEPTH_SCALE);
        assert_eq!(&buf[..info.buffer_size()], &direct.rgb[..]);
    }
    assert_eq!(previews, 3);
}

#[test]
fn toggle_record_without_directory_is_a_hud_error() {
    let mut s = SimState::new(scene(), fixed());
    let events = s.tick(&[Command::ToggleRecord]);
    assert!(matches!(events.as_slice(), [SimEvent::Error(_)]));
    assert!(!s.recording());
    assert!(s.hud().messages().iter().any(|m| m.level == HudLevel::Error));
}

#[test]
fn toggle_record_writes_numbered_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig { record_dir: Some(dir.path().to_path_buf()), ..fixed() };
    let mut s = SimState::new(scene(), cfg);
    s.tick(&[Command::ToggleRecord]);
    assert!(s.recording());
    assert!(s.hud().contains("RECORDING"));
    for _ in 0..9 {
        s.tick(&[]);
    }
    let ev = s.tick(&[Command::ToggleRecord]);
    let Some(SimEvent::RecordingStopped(sum)) = ev.first() else { panic!("{ev:?}") };
    // the toggle tick itself is recorded, the stopping tick is not
    assert_eq!(sum.frames_written, 10);
    assert!(!s.hud().contains("RECORDING"));
    s.tick(&[Command::ToggleRecord]);
    s.tick(&[Command::ToggleRecord]);
    assert!(dir.path().join("session_001.log").exists());
    assert!(dir.path().join("session_002.log").exists());
    let text = std::fs::read_to_string(dir.path().join("session_001.log")).unwrap();
    assert!(text.starts_with("# roxraw v1 tick_hz=30 units=m start=0 scene="));
}

#[test]
fn hud_timing_in_ticks() {
    let mut s = SimState::new(scene(), fixed());
    s.tick(&[Command::SelectCamera("head".into())]);
    let mut gone = None;
    for t in 1..400u64 {
        s.tick(&[]);
        if !s.hud().contains("camera: head") {
            gone = Some(t);
            break;
        }
    }
    // pushed at tick 0, still present at exactly 5 s (tick 150)
    assert_eq!(gone, Some(151));

    let mut s = SimState::new(scene(), fixed());
    s.tick(&[Command::SelectCamera("nope".into())]);
    let err = s.hud().messages().iter().find(|m| m.level == HudLevel::Error).unwrap().text.clone();
    let ticks = (ERROR_TTL_S * 30.0) as u64;
    for _ in 0..ticks {
        s.tick(&[]);
    }
    assert!(s.hud().contains(&err), "error still shown at 30 s");
    s.tick(&[]);
    assert!(!s.hud().contains(&err));

    let mut s = SimState::new(scene(), fixed());
    s.tick(&[Command::SelectCamera("first".into())]);
    s.tick(&[]);
    s.tick(&[Command::SelectCamera("second".into())]);
    let errs: Vec<_> = s.hud().messages().iter().filter(|m| m.level == HudLevel::Error).collect();
    assert_eq!(errs.len(), 1);
    assert!(errs[0].text.contains("second"));
}

#[test]
fn state_message_reports_grasp_and_camera() {
    let mut s = SimState::new(scene(), fixed());
    let (cmd, _) = handle_command(r#"{"type":"camera","name":"front_L"}"#).unwrap();
    s.tick(&[cmd]);
    let v: serde_json::Value = serde_json::from_str(&s.state_message().to_json()).unwrap();
    assert_eq!(v["type"], "state");
    assert_eq!(v["tick"], 0);
    assert_eq!(v["camera"], "front_L");
    assert_eq!(v["recording"], false);
    assert!(v["grasped"]["right"].is_null());
    assert_eq!(v["hud"][0]["text"], "camera: front_L");
}

#[test]
fn reset_restores_initial_objects() {
    let scene = scene();
    let script = Script::load(&assets().join("scripts/grasp_box.json")).unwrap();
    let mut s = SimState::new(scene.clone(), fixed());
    for t in 0..100 {
        s.tick(&commands_at(&script, t));
    }
    assert_eq!(s.grasped().right.as_deref(), Some("box"));
    s.tick(&[Command::Reset]);
    assert_eq!(s.grasped().right, None);
    let bi = scene.object_index("box").unwrap();
    assert_eq!(s.snapshot().objects[bi].pose, scene.objects[bi].pose);
}

#[test]
fn base_motion_moves_attached_cameras() {
    let scene = scene();
    let mut s = SimState::new(scene.clone(), fixed());
    let head = scene.camera_index("head").unwrap();
    s.tick(&[]);
    let before = s.snapshot().cameras[head];
    s.tick(&[Command::Move { dx: 0.3, dy: 0.0, dyaw: 0.0 }]);
    for _ in 0..29 {
        s.tick(&[]);
    }
    let after = s.snapshot().cameras[head];
    assert!(((after.position - before.position).x - 0.3).abs() < 1e-9);
    let ext = scene.camera_index("external").unwrap();
    assert_eq!(s.snapshot().cameras[ext], scene.initial_snapshot().cameras[ext]);
}

#[test]
fn empty_script_records_every_tick() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("idle.log");
    let mut s = SimState::new(scene(), fixed());
    let script = Script::parse(r#"{"ticks": 10, "commands": []}"#).unwrap();
    let run = run_script(&mut s, &script, Some(&path)).unwrap();
    assert_eq!(run.summary.unwrap().frames_written, 10);
    assert!(run.events.is_empty());
    let seq = convert_raw_to_sequence(&std::fs::read_to_string(&path).unwrap(), &scene()).unwrap();
    let ids: Vec<u64> = seq.frames.iter().map(|f| f.frame_id).collect();
    assert_eq!(ids, (0..10).collect::<Vec<_>>());
}
