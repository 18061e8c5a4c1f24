//! Operator message buffer: short-lived notices, a single long-lived error
//! line and a persistent recording banner.

use serde::Serialize;

pub const STATE_TTL_S: f64 = 5.0;
pub const ERROR_TTL_S: f64 = 30.0;
pub const RECORDING_BANNER: &str = "RECORDING";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HudLevel {
    State,
    Error,
    Recording,
}

impl HudLevel {
    pub fn ttl(self) -> f64 {
        match self {
            HudLevel::State => STATE_TTL_S,
            HudLevel::Error => ERROR_TTL_S,
            HudLevel::Recording => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HudMessage {
    pub level: HudLevel,
    pub text: String,
    pub ttl_s: f64,
    pub created_at: f64,
}

impl HudMessage {
    fn expired(&self, now: f64) -> bool {
        // slack absorbs k/hz rounding so a 5 s message survives the tick at exactly 5 s
        now - self.created_at > self.ttl_s + 1e-9
    }
}

/// What a client displays.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HudEntry {
    pub level: HudLevel,
    pub text: String,
    /// `None` for the recording banner.
    pub remaining_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hud {
    messages: Vec<HudMessage>,
}

impl Hud {
    pub fn new() -> Hud {
        Hud::default()
    }

    /// Adds a message; a new error replaces any previous error.
    pub fn push(&mut self, level: HudLevel, text: impl Into<String>, now: f64) {
        if level != HudLevel::State {
            self.messages.retain(|m| m.level != level);
        }
        self.messages.push(HudMessage { level, text: text.into(), ttl_s: level.ttl(), created_at: now });
    }

    pub fn set_recording(&mut self, on: bool, now: f64) {
        if on {
            self.push(HudLevel::Recording, RECORDING_BANNER, now);
        } else {
            self.messages.retain(|m| m.level != HudLevel::Recording);
        }
    }

    pub fn expire(&mut self, now: f64) {
        self.messages.retain(|m| !m.expired(now));
    }

    pub fn messages(&self) -> &[HudMessage] {
        &self.messages
    }

    pub fn contains(&self, text: &str) -> bool {
        self.messages.iter().any(|m| m.text == text)
    }

    /// Banner first, then the error line, then notices oldest first.
    pub fn entries(&self, now: f64) -> Vec<HudEntry> {
        let rank = |l: HudLevel| match l {
            HudLevel::Recording => 0,
            HudLevel::Error => 1,
            HudLevel::State => 2,
        };
        let mut v: Vec<&HudMessage> = self.messages.iter().collect();
        v.sort_by_key(|m| rank(m.level));
        v.into_iter()
            .map(|m| HudEntry {
                level: m.level,
                text: m.text.clone(),
                remaining_s: m.ttl_s.is_finite().then(|| (m.created_at + m.ttl_s - now).max(0.0)),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_message_lives_five_seconds() {
        let mut h = Hud::new();
        h.push(HudLevel::State, "hello", 0.0);
        h.expire(5.0);
        assert!(h.contains("hello"));
        h.expire(5.1);
        assert!(!h.contains("hello"));
    }

    #[test]
    fn error_lives_thirty_seconds() {
        let mut h = Hud::new();
        h.push(HudLevel::Error, "boom", 0.0);
        h.expire(29.0);
        assert!(h.contains("boom"));
        h.expire(31.0);
        assert!(!h.contains("boom"));
    }

    #[test]
    fn second_error_evicts_first() {
        let mut h = Hud::new();
        h.push(HudLevel::Error, "A", 0.0);
        h.push(HudLevel::State, "note", 0.5);
        h.push(HudLevel::Error, "B", 1.0);
        assert!(!h.contains("A"));
        assert!(h.contains("B"));
        assert!(h.contains("note"));
        assert_eq!(h.messages().iter().filter(|m| m.level == HudLevel::Error).count(), 1);
    }

    #[test]
    fn banner_persists() {
        let mut h = Hud::new();
        h.set_recording(true, 0.0);
        h.set_recording(true, 1.0);
        h.expire(1e6);
        assert_eq!(h.messages().len(), 1);
        let e = h.entries(1e6);
        assert_eq!(e[0].text, RECORDING_BANNER);
        assert_eq!(e[0].remaining_s, None);
        h.set_recording(false, 2.0);
        assert!(h.messages().is_empty());
    }

    #[test]
    fn expiry_at_thirty_hz_ticks() {
        for created in [0u64, 1, 7, 299, 12345] {
            let mut h = Hud::new();
            h.push(HudLevel::State, "s", created as f64 / 30.0);
            let mut gone = None;
            for k in created.. {
                h.expire(k as f64 / 30.0);
                if !h.contains("s") {
                    gone = Some(k);
                    break;
                }
            }
            assert_eq!(gone.unwrap() - created, 151);
        }
    }
}
