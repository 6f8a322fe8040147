//! Wire messages. Every message is one JSON object on one line, carried in
//! a WebSocket text frame, with a `type` tag.

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// The JSON Schema shipped with the server.
pub const SCHEMA: &str = include_str!("../protocol/schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    SetAlpha {
        values: Vec<f64>,
    },
    /// Ends the current episode and starts a new one.
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub layout: String,
    pub personas: Vec<String>,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub heading: f64,
    pub speed: f64,
    pub airborne: bool,
}

/// Action counts over the most recent `window` steps. Discrete actions
/// have one row of category counts; continuous actions one row of bin
/// counts per dimension over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollingHistogram {
    pub window: usize,
    pub samples: usize,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub session_id: u64,
    pub tick: u64,
    pub episode: u64,
    pub step: usize,
    pub agent: Pose,
    pub goal: [f64; 3],
    pub entities: Vec<[f64; 3]>,
    /// Category index for discrete envs, one value per dimension otherwise.
    pub action: Vec<f64>,
    pub scores: Vec<f64>,
    pub r_g: f64,
    pub r_s: f64,
    pub alpha: Vec<f64>,
    pub histogram: RollingHistogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: usize,
    pub reached_goal: bool,
    pub return_g: f64,
    pub return_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    AlphaArity,
    AlphaRange,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        protocol: u32,
        session_id: u64,
        env_id: String,
        n_personas: usize,
        checkpoint_meta: CheckpointMeta,
        tick_rate: f64,
        alpha: Vec<f64>,
    },
    Ack {
        values: Vec<f64>,
        /// First tick whose step uses the new values.
        effective_tick: u64,
    },
    Frame(Frame),
    EpisodeEnd {
        session_id: u64,
        episode: u64,
        tick: u64,
        stats: EpisodeStats,
    },
    Error {
        code: ErrorCode,
        msg: String,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, msg: impl Into<String>) -> Self {
        ServerMessage::Error { code, msg: msg.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ServerMessage::Hello { .. } => "hello",
            ServerMessage::Ack { .. } => "ack",
            ServerMessage::Frame(_) => "frame",
            ServerMessage::EpisodeEnd { .. } => "episode_end",
            ServerMessage::Error { .. } => "error",
        }
    }

    /// One line, newline-terminated.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("server messages serialize");
        s.push('\n');
        s
    }
}

impl ClientMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("client messages serialize");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        serde_json::from_str(line.trim()).map_err(|e| e.to_string())
    }
}

pub fn parse_server(line: &str) -> Result<ServerMessage, String> {
    serde_json::from_str(line.trim()).map_err(|e| e.to_string())
}
