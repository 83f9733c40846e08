//! Control API messages. One JSON object per line in each direction.

use serde::{Deserialize, Serialize};

use crate::session::Phase;
use crate::transport::Endpoint;
use crate::vault::PadMetadata;

pub const SCHEMA_VERSION: u32 = 1;

/// Client to daemon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlRequest {
    /// Ask for a session-list snapshot followed by live events.
    Subscribe,
    /// Any operator line: a slash command or chat text.
    Command {
        line: String,
        #[serde(default)]
        session: Option<u32>,
    },
    Chat {
        text: String,
        #[serde(default)]
        session: Option<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub pad: u32,
    pub phase: Phase,
    pub blocked: bool,
    pub halted: bool,
    pub remote: Option<Endpoint>,
    pub controls_page_turns: bool,
    pub queued: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultRow {
    #[serde(flatten)]
    pub meta: PadMetadata,
    pub controls_page_turns: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferDirection {
    Out,
    In,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferKind {
    File,
    Listing,
    Gibberish,
    Distribution,
}

/// Daemon to client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ControlEvent {
    ChatIn {
        session: u32,
        text: String,
    },
    ChatEcho {
        session: u32,
        text: String,
    },
    SessionList {
        selected: Option<u32>,
        sessions: Vec<SessionView>,
    },
    VaultRows {
        rows: Vec<VaultRow>,
        text: String,
    },
    TransferProgress {
        session: u32,
        direction: TransferDirection,
        kind: TransferKind,
        name: String,
        done: u64,
        total: u64,
        finished: bool,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        elapsed_ms: Option<u64>,
    },
    Status {
        session: Option<u32>,
        text: String,
    },
    Error {
        session: Option<u32>,
        code: String,
        message: String,
    },
}

impl ControlEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlEvent::ChatIn { .. } => "chat-in",
            ControlEvent::ChatEcho { .. } => "chat-echo",
            ControlEvent::SessionList { .. } => "session-list",
            ControlEvent::VaultRows { .. } => "vault-rows",
            ControlEvent::TransferProgress { .. } => "transfer-progress",
            ControlEvent::Status { .. } => "status",
            ControlEvent::Error { .. } => "error",
        }
    }
}

/// A daemon message as sent on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFrame {
    pub v: u32,
    #[serde(flatten)]
    pub event: ControlEvent,
}

/// Encode one event as a newline-terminated line.
pub fn encode_event(event: &ControlEvent) -> String {
    let mut s = serde_json::to_string(&ControlFrame { v: SCHEMA_VERSION, event: event.clone() })
        .expect("control events always serialize");
    s.push('\n');
    s
}

/// Parse one request line. Failures become an `error` event for the sender.
pub fn decode_request(line: &str) -> Result<ControlRequest, ControlEvent> {
    serde_json::from_str(line.trim()).map_err(|e| ControlEvent::Error {
        session: None,
        code: "malformed-control-message".into(),
        message: e.to_string(),
    })
}
