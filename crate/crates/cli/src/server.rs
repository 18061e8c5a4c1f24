//! WebSocket front end. One thread owns the simulation; sockets only feed
//! an ordered command queue and read from a broadcast of outgoing messages.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use roxsim_core::sim::hud::HudLevel;
use roxsim_core::sim::protocol::{handle_command, Command, ServerMessage};
use roxsim_core::sim::SimState;
use tokio::net::TcpListener;
use tokio::sync::broadcast;

/// Outgoing messages buffered per subscriber before a slow client starts
/// missing frames.
const OUTBOUND_CAPACITY: usize = 256;

enum Inbound {
    Command(Command),
    Notice(String),
}

/// Running simulation thread.
pub struct SimHandle {
    commands: mpsc::Sender<Inbound>,
    outbound: broadcast::Sender<String>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<SimState>>,
}

impl SimHandle {
    /// Starts ticking `sim` in real time at its configured rate.
    pub fn spawn(mut sim: SimState) -> SimHandle {
        let (tx, rx) = mpsc::channel::<Inbound>();
        let (out, _) = broadcast::channel(OUTBOUND_CAPACITY);
        let stop = Arc::new(AtomicBool::new(false));
        let period = Duration::from_secs_f64(1.0 / sim.hz());
        let thread = {
            let out = out.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("sim".into())
                .spawn(move || {
                    let mut next = Instant::now();
                    while !stop.load(Ordering::Relaxed) {
                        let mut cmds = Vec::new();
                        while let Ok(m) = rx.try_recv() {
                            match m {
                                Inbound::Command(c) => cmds.push(c),
                                Inbound::Notice(text) => {
                                    let now = sim.time();
                                    sim.hud_mut().push(HudLevel::State, text, now);
                                }
                            }
                        }
                        sim.tick(&cmds);
                        // nobody listening is fine
                        let _ = out.send(sim.state_message().to_json());
                        if out.receiver_count() > 0 {
                            if let Some(frame) = sim.preview() {
                                let _ = out.send(frame.to_json());
                            }
                        }
                        next += period;
                        let now = Instant::now();
                        if next > now {
                            std::thread::sleep(next - now);
                        } else {
                            // fell behind; do not try to catch up
                            next = now;
                        }
                    }
                    sim
                })
                .expect("spawn simulation thread")
        };
        SimHandle { commands: tx, outbound: out, stop, thread: Some(thread) }
    }

    /// Stops the loop and hands back the final state.
    pub fn shutdown(mut self) -> SimState {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.take().expect("joined once").join().expect("simulation thread panicked")
    }

    pub fn router(&self) -> Router {
        let shared = Shared { commands: self.commands.clone(), outbound: self.outbound.clone() };
        Router::new().route("/ws", get(upgrade)).with_state(shared)
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

#[derive(Clone)]
struct Shared {
    commands: mpsc::Sender<Inbound>,
    outbound: broadcast::Sender<String>,
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Shared>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, shared))
}

async fn client(mut socket: WebSocket, shared: Shared) {
    let mut feed = shared.outbound.subscribe();
    log::info!("client connected");
    loop {
        tokio::select! {
            msg = socket.recv() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = match handle_command(&text) {
                    Ok((cmd, notice)) => {
                        if let Some(n) = notice {
                            let _ = shared.commands.send(Inbound::Notice(n));
                        }
                        if shared.commands.send(Inbound::Command(cmd)).is_err() {
                            break;
                        }
                        None
                    }
                    Err(e) => {
                        log::debug!("rejected message: {e}");
                        Some(ServerMessage::Error { detail: e.to_string() }.to_json())
                    }
                };
                if let Some(r) = reply {
                    if socket.send(Message::Text(r.into())).await.is_err() {
                        break;
                    }
                }
            }
            out = feed.recv() => {
                match out {
                    Ok(text) => {
                        if socket.send(Message::Text(text.into())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => log::debug!("client lagged, skipped {n} messages"),
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        }
    }
    log::info!("client disconnected");
}

/// Serves `/ws` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    handle: &SimHandle,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, handle.router()).with_graceful_shutdown(shutdown).await
}

pub async fn bind(host: &str, port: u16) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind((host, port)).await?;
    let addr = listener.local_addr()?;
    Ok((listener, addr))
}
