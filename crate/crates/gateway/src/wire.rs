//! WebSocket frame schema, version 1.
//!
//! Each WebSocket text message carries one JSON object:
//!
//! | field         | frames                 | meaning                                        |
//! |---------------|------------------------|------------------------------------------------|
//! | `type`        | all                    | `hello`, `message`, `action`, `error`, `ping`  |
//! | `seq`         | all                    | sender's frame counter, strictly increasing    |
//! | `version`     | `hello`                | protocol version, currently `1`                |
//! | `channel`     | `hello`, `message`, `action` | chat channel                             |
//! | `user`        | `hello`, `message`     | display name of the tester                     |
//! | `text`        | `message`, `action`, `error` | message body or diagnostic               |
//! | `attachments` | `message`, `action`    | named references to uploaded files; omitted when empty |
//! | `kind`        | `action`               | `reply`, `prompt`, `reminder`, `suggestion`, `notice` |
//! | `code`        | `error`                | `malformed`, `oversized`, `unknown-type`, `version`, `not-joined`, `unexpected` |
//!
//! Attachments travel as `{"name", "ref", "media", "size"}` where `ref` is
//! the handle returned by the upload endpoint.

use etbot_core::{ActionKind, Attachment, InboundMessage, MediaKind, OutboundAction, Timestamp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_MAX_FRAME_BYTES: usize = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameType {
    Hello,
    Message,
    Action,
    Error,
    Ping,
}

impl FrameType {
    const NAMES: [&'static str; 5] = ["hello", "message", "action", "error", "ping"];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireAttachment {
    pub name: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub media: MediaKind,
    #[serde(default)]
    pub size: u64,
}

impl From<&Attachment> for WireAttachment {
    fn from(a: &Attachment) -> Self {
        Self {
            name: a.filename.clone(),
            reference: a.content_ref.clone(),
            media: a.media_kind,
            size: a.size_bytes,
        }
    }
}

impl From<&WireAttachment> for Attachment {
    fn from(a: &WireAttachment) -> Self {
        Attachment::new(a.name.clone(), a.media, a.reference.clone(), a.size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireFrame {
    #[serde(rename = "type")]
    pub frame_type: FrameType,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<WireAttachment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
}

impl WireFrame {
    pub fn new(frame_type: FrameType, seq: u64) -> Self {
        Self {
            frame_type,
            seq,
            version: None,
            channel: None,
            user: None,
            text: None,
            attachments: Vec::new(),
            kind: None,
            code: None,
        }
    }

    pub fn hello(seq: u64, channel: &str, user: &str) -> Self {
        Self {
            version: Some(PROTOCOL_VERSION),
            channel: Some(channel.to_owned()),
            user: Some(user.to_owned()),
            ..Self::new(FrameType::Hello, seq)
        }
    }

    pub fn message(seq: u64, channel: &str, user: &str, text: &str) -> Self {
        Self {
            channel: Some(channel.to_owned()),
            user: Some(user.to_owned()),
            text: Some(text.to_owned()),
            ..Self::new(FrameType::Message, seq)
        }
    }

    pub fn error(seq: u64, code: &str, text: impl Into<String>) -> Self {
        Self {
            code: Some(code.to_owned()),
            text: Some(text.into()),
            ..Self::new(FrameType::Error, seq)
        }
    }

    pub fn action(seq: u64, action: &OutboundAction) -> Self {
        let attachments = match &action.kind {
            ActionKind::Reply { attachments, .. } => attachments.iter().map(WireAttachment::from).collect(),
            _ => Vec::new(),
        };
        Self {
            channel: Some(action.channel_id.to_string()),
            text: Some(action.text().to_owned()),
            attachments,
            kind: Some(action.kind_name().to_owned()),
            ..Self::new(FrameType::Action, seq)
        }
    }

    /// Converts a `message` frame into an engine message stamped `at`.
    pub fn to_inbound(&self, at: Timestamp) -> Option<InboundMessage> {
        if self.frame_type != FrameType::Message {
            return None;
        }
        Some(InboundMessage {
            channel_id: self.channel.clone()?.into(),
            user_id: self.user.clone()?.into(),
            text: self.text.clone().unwrap_or_default(),
            attachments: self.attachments.iter().map(Attachment::from).collect(),
            timestamp: at,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame of {size} bytes exceeds the {limit}-byte limit")]
    Oversized { size: usize, limit: usize },
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unknown frame type {0:?}")]
    UnknownType(String),
}

impl FrameError {
    pub fn code(&self) -> &'static str {
        match self {
            FrameError::Oversized { .. } => "oversized",
            FrameError::Malformed(_) => "malformed",
            FrameError::UnknownType(_) => "unknown-type",
        }
    }

    pub fn to_frame(&self, seq: u64) -> WireFrame {
        WireFrame::error(seq, self.code(), self.to_string())
    }
}

pub fn decode_frame(bytes: &[u8], max_bytes: usize) -> Result<WireFrame, FrameError> {
    if bytes.len() > max_bytes {
        return Err(FrameError::Oversized {
            size: bytes.len(),
            limit: max_bytes,
        });
    }
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| FrameError::Malformed(e.to_string()))?;
    let frame_type = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| FrameError::Malformed("missing \"type\"".into()))?;
    if !FrameType::NAMES.contains(&frame_type) {
        return Err(FrameError::UnknownType(frame_type.to_owned()));
    }
    serde_json::from_value(value).map_err(|e| FrameError::Malformed(e.to_string()))
}

pub fn encode_frame(frame: &WireFrame) -> Vec<u8> {
    serde_json::to_vec(frame).expect("frames serialize")
}
