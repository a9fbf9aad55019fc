//! Messages exchanged between device agents and the orchestrator over the
//! device channel, plus the experiment input schema.

use serde::{Deserialize, Serialize};

use crate::physics::ExperimentKind;

/// Fault codes a device reports on its error pin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCode {
    /// Motor driver did not respond.
    E01,
    /// Limit switch never triggered while homing.
    E02,
    /// Command exceeded the travel limits and was clamped.
    E03,
    /// Camera could not capture.
    E10,
    /// Interoperability cloud unreachable.
    E20,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 5] = [ErrorCode::E01, ErrorCode::E02, ErrorCode::E03, ErrorCode::E10, ErrorCode::E20];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::E01 => "E01",
            ErrorCode::E02 => "E02",
            ErrorCode::E03 => "E03",
            ErrorCode::E10 => "E10",
            ErrorCode::E20 => "E20",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ErrorCode::E01 => "motor-driver-fault",
            ErrorCode::E02 => "limit-switch-timeout",
            ErrorCode::E03 => "threshold-exceeded",
            ErrorCode::E10 => "camera-failure",
            ErrorCode::E20 => "cloud-unreachable",
        }
    }

    pub fn parse(s: &str) -> Option<ErrorCode> {
        ErrorCode::ALL.into_iter().find(|c| c.as_str() == s.trim())
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Timeout,
    UserLeft,
    /// The device dropped off the channel.
    Disconnected,
    /// The server withdrew an entry probe.
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Object,
    Screen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// Parameters for one actuation command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputParams {
    Lens { target: Target, steps: i64 },
    Rods { direction: Direction, steps: u32 },
}

impl InputParams {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            InputParams::Lens { .. } => ExperimentKind::FocalLength,
            InputParams::Rods { .. } => ExperimentKind::VanishingRod,
        }
    }

    /// Validates a raw JSON body for an experiment of `kind`.
    pub fn parse(kind: ExperimentKind, raw: &serde_json::Value) -> Result<InputParams, String> {
        let obj = raw.as_object().ok_or("input must be a JSON object")?;
        match kind {
            ExperimentKind::FocalLength => {
                let target = match obj.get("target").and_then(|t| t.as_str()) {
                    Some("object") => Target::Object,
                    Some("screen") => Target::Screen,
                    other => return Err(format!("target must be \"object\" or \"screen\", got {other:?}")),
                };
                let steps = obj
                    .get("steps")
                    .and_then(|s| s.as_i64())
                    .ok_or("steps must be an integer")?;
                Ok(InputParams::Lens { target, steps })
            }
            ExperimentKind::VanishingRod => {
                let direction = match obj.get("direction").and_then(|t| t.as_str()) {
                    Some("up") => Direction::Up,
                    Some("down") => Direction::Down,
                    other => return Err(format!("direction must be \"up\" or \"down\", got {other:?}")),
                };
                let steps = obj
                    .get("steps")
                    .and_then(|s| s.as_u64())
                    .and_then(|s| u32::try_from(s).ok())
                    .ok_or("steps must be a non-negative integer")?;
                Ok(InputParams::Rods { direction, steps })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChannelMessage {
    Auth {
        experiment_id: String,
        device_id: String,
        secret: String,
    },
    AuthOk {
        room: String,
    },
    AuthFail {
        reason: String,
    },
    SessionStart {
        session_id: String,
        user_peer_id: String,
        duration_s: u64,
    },
    Ack {
        session_id: String,
    },
    SessionEnd {
        session_id: String,
        reason: EndReason,
    },
    Input {
        session_id: String,
        params: InputParams,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
}

impl ChannelMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            ChannelMessage::Auth { .. } => "AUTH",
            ChannelMessage::AuthOk { .. } => "AUTH_OK",
            ChannelMessage::AuthFail { .. } => "AUTH_FAIL",
            ChannelMessage::SessionStart { .. } => "SESSION_START",
            ChannelMessage::Ack { .. } => "ACK",
            ChannelMessage::SessionEnd { .. } => "SESSION_END",
            ChannelMessage::Input { .. } => "INPUT",
            ChannelMessage::Error { .. } => "ERROR",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("channel messages serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
