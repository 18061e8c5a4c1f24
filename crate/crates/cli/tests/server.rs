use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use roxsim::server::{bind, serve, SimHandle};
use roxsim_core::recorder::{convert_raw_file, validate_sequence};
use roxsim_core::scene::Scene;
use roxsim_core::sim::{SimConfig, SimState};
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

fn scene() -> Arc<Scene> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/scenes/grasp_table.json");
    Arc::new(Scene::load(&p).unwrap())
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn next_json(ws: &mut Ws, want: &str) -> Value {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
    loop {
        let msg = tokio::time::timeout_at(deadline, ws.next()).await.expect("timed out").unwrap().unwrap();
        if let Message::Text(t) = msg {
            let v: Value = serde_json::from_str(&t).unwrap();
            if v["type"] == want {
                return v;
            }
        }
    }
}

async fn wait_state(ws: &mut Ws, pred: impl Fn(&Value) -> bool) -> Value {
    loop {
        let v = next_json(ws, "state").await;
        if pred(&v) {
            return v;
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_session() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig { record_dir: Some(dir.path().to_path_buf()), ..SimConfig::default() };
    let handle = SimHandle::spawn(SimState::new(scene(), cfg));
    let (listener, addr) = bind("127.0.0.1", 0).await.unwrap();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let router = handle.router();
    let server = tokio::spawn(async move {
        axum_serve(listener, router, stop_rx).await;
    });

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();

    let s = next_json(&mut ws, "state").await;
    assert_eq!(s["camera"], "external");
    assert!(s["grasped"].get("left").is_some());

    let f = next_json(&mut ws, "frame").await;
    assert_eq!(f["encoding"], "png-base64");
    assert_eq!(f["tick"].as_u64().unwrap() % 3, 0);

    ws.send(Message::text("{not json")).await.unwrap();
    let e = next_json(&mut ws, "error").await;
    assert!(e["detail"].as_str().unwrap().contains("malformed"));

    ws.send(Message::text(r#"{"type":"camera","name":"head"}"#)).await.unwrap();
    wait_state(&mut ws, |v| v["camera"] == "head").await;
    loop {
        let f = next_json(&mut ws, "frame").await;
        if f["camera"] == "head" {
            break;
        }
    }

    ws.send(Message::text(r#"{"type":"warp"}"#)).await.unwrap();
    wait_state(&mut ws, |v| v["hud"].as_array().unwrap().iter().any(|h| h["text"].as_str().unwrap().contains("warp")))
        .await;

    ws.send(Message::text(r#"{"type":"toggle_record"}"#)).await.unwrap();
    let v = wait_state(&mut ws, |v| v["recording"] == true).await;
    assert_eq!(v["hud"][0]["text"], "RECORDING");
    assert!(v["hud"][0]["remaining_s"].is_null());
    ws.send(Message::text(r#"{"type":"toggle_record"}"#)).await.unwrap();
    wait_state(&mut ws, |v| v["recording"] == false).await;

    ws.send(Message::text(r#"{"type":"camera","name":"nope"}"#)).await.unwrap();
    let v = wait_state(&mut ws, |v| v["hud"].as_array().unwrap().iter().any(|h| h["level"] == "error")).await;
    let err = v["hud"].as_array().unwrap().iter().find(|h| h["level"] == "error").unwrap();
    assert!(err["remaining_s"].as_f64().unwrap() > 29.0);

    ws.close(None).await.unwrap();
    stop_tx.send(()).unwrap();
    server.await.unwrap();
    let sim = handle.shutdown();
    assert!(!sim.recording());
    let log = dir.path().join("session_001.log");
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("# roxraw v1 tick_hz=30"));
    let seq = convert_raw_file(&log, &scene()).unwrap();
    assert!(!seq.frames.is_empty());
    assert!(validate_sequence(&seq).is_empty());
}

async fn axum_serve(listener: tokio::net::TcpListener, router: axum::Router, stop: tokio::sync::oneshot::Receiver<()>) {
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = stop.await;
        })
        .await
        .unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serve_helper_shuts_down() {
    let handle = SimHandle::spawn(SimState::new(scene(), SimConfig::default()));
    let (listener, _) = bind("127.0.0.1", 0).await.unwrap();
    serve(listener, &handle, async {}).await.unwrap();
    let sim = handle.shutdown();
    assert_eq!(sim.hz(), 30.0);
}
