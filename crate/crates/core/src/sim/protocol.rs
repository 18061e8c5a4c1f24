//! JSON text messages exchanged with teleoperation clients.
//!
//! Client to server, one object per message:
//!
//! ```text
//! {"type":"move","dx":0.2,"dy":0,"dyaw":0}
//! {"type":"hand","side":"right","position":[0.3,-0.2,0.9],"rotation":[1,0,0,0]}
//! {"type":"grip","side":"right","value":0.8}
//! {"type":"toggle_record"} | {"type":"reset"} | {"type":"camera","name":"external"}
//! ```
//!
//! Server to client: `state`, `frame` and `error` messages ([`ServerMessage`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Quat, Vec3};
use crate::schema::Side;
use crate::sim::hud::HudEntry;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    /// Base velocity in the robot frame: m/s forward/left, rad/s yaw.
    Move {
        dx: f64,
        dy: f64,
        dyaw: f64,
    },
    /// Wrist goal in the robot base frame. Without a rotation the previous
    /// goal orientation is kept.
    HandTarget {
        side: Side,
        position: Vec3,
        rotation: Option<Quat>,
    },
    Grip {
        side: Side,
        value: f64,
    },
    ToggleRecord,
    Reset,
    SelectCamera(String),
    Noop,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("non-finite value in '{0}'")]
    NonFinite(&'static str),
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum Wire {
    Move {
        #[serde(default)]
        dx: f64,
        #[serde(default)]
        dy: f64,
        #[serde(default)]
        dyaw: f64,
    },
    Hand {
        side: Side,
        position: [f64; 3],
        #[serde(default)]
        rotation: Option<[f64; 4]>,
    },
    Grip {
        side: Side,
        value: f64,
    },
    ToggleRecord {},
    Reset {},
    Camera {
        name: String,
    },
}

pub const COMMAND_TYPES: [&str; 6] = ["move", "hand", "grip", "toggle_record", "reset", "camera"];

fn finite(what: &'static str, xs: &[f64]) -> Result<(), ProtocolError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ProtocolError::NonFinite(what))
    }
}

/// Parses a JSON command value. Unknown types become `Noop` with a notice
/// for the operator.
pub fn command_from_value(v: serde_json::Value) -> Result<(Command, Option<String>), ProtocolError> {
    let ty = v
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| ProtocolError::Malformed("missing string field 'type'".into()))?;
    if !COMMAND_TYPES.contains(&ty) {
        let note = format!("ignored unknown command '{ty}'");
        return Ok((Command::Noop, Some(note)));
    }
    let wire: Wire = serde_json::from_value(v).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let cmd = match wire {
        Wire::Move { dx, dy, dyaw } => {
            finite("move", &[dx, dy, dyaw])?;
            Command::Move { dx, dy, dyaw }
        }
        Wire::Hand { side, position, rotation } => {
            finite("position", &position)?;
            let rotation = match rotation {
                Some(q) => {
                    finite("rotation", &q)?;
                    let q = Quat::from(q);
                    if q.norm() < 1e-9 {
                        return Err(ProtocolError::Malformed("zero rotation quaternion".into()));
                    }
                    Some(q.normalized())
                }
                None => None,
            };
            Command::HandTarget { side, position: position.into(), rotation }
        }
        Wire::Grip { side, value } => {
            finite("value", &[value])?;
            Command::Grip { side, value: value.clamp(0.0, 1.0) }
        }
        Wire::ToggleRecord {} => Command::ToggleRecord,
        Wire::Reset {} => Command::Reset,
        Wire::Camera { name } => Command::SelectCamera(name),
    };
    Ok((cmd, None))
}

/// Parses one text message from a client.
pub fn handle_command(raw: &str) -> Result<(Command, Option<String>), ProtocolError> {
    let v: serde_json::Value = serde_json::from_str(raw).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if !v.is_object() {
        return Err(ProtocolError::Malformed("expected a JSON object".into()));
    }
    command_from_value(v)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Grasped {
    pub left: Option<String>,
    pub right: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State { tick: u64, recording: bool, camera: String, grasped: Grasped, hud: Vec<HudEntry> },
    Frame { camera: String, tick: u64, encoding: String, data: String },
    Error { detail: String },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
