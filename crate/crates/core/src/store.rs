//! Append-only audit log.
//!
//! Every inbound message, outbound action, timer event and durable fact is one
//! [`EventRecord`]. There is no update or delete. The default backend writes
//! one JSON object per line after a schema header line:
//!
//! ```text
//! {"schema":"etbot-audit","version":1}
//! {"offset":0,"timestamp":0,"channel_id":"general","actor":{"tester":"beth"},"direction":"inbound","payload_kind":"command","text":"?start"}
//! ```

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialog::Fact;
use crate::session::TimerEvent;
use crate::types::{Attachment, ChannelId, FlowId, SessionId, Timestamp, UserId};

pub const SCHEMA_NAME: &str = "etbot-audit";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Bot,
    Tester(UserId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Inbound,
    Outbound,
    Internal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Command,
    InvalidCommand,
    FlowReply,
    Plain,
    Reply,
    Prompt,
    Reminder,
    Suggestion,
    System,
    Timer,
}

/// Structured content attached to internal records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordData {
    Timer(TimerEvent),
    Fact(Fact),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub offset: u64,
    #[serde(flatten)]
    pub body: RecordBody,
}

impl std::ops::Deref for EventRecord {
    type Target = RecordBody;

    fn deref(&self) -> &RecordBody {
        &self.body
    }
}

/// Everything in a record except its offset, which the store assigns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordBody {
    pub timestamp: Timestamp,
    pub channel_id: ChannelId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    pub actor: Actor,
    pub direction: Direction,
    pub payload_kind: PayloadKind,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_id: Option<FlowId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<RecordData>,
}

impl RecordBody {
    pub fn is_chat(&self) -> bool {
        self.direction != Direction::Internal
    }

    pub fn tester(&self) -> Option<&UserId> {
        match &self.actor {
            Actor::Tester(user) => Some(user),
            Actor::Bot => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvalidRecord {
    #[error("{0:?} records must carry a correlation_id")]
    MissingCorrelation(PayloadKind),
    #[error("{0:?} records must not carry a correlation_id")]
    UnexpectedCorrelation(PayloadKind),
    #[error("payload kind {kind:?} is not allowed for {direction:?} records")]
    KindMismatch { direction: Direction, kind: PayloadKind },
    #[error("{0:?} records must come from {1}")]
    ActorMismatch(Direction, &'static str),
    #[error("correlation_id {0} does not refer to an earlier record")]
    DanglingCorrelation(u64),
}

pub fn validate(body: &RecordBody) -> Result<(), InvalidRecord> {
    use PayloadKind::*;
    let allowed: &[PayloadKind] = match body.direction {
        Direction::Inbound => &[Command, InvalidCommand, FlowReply, Plain],
        Direction::Outbound => &[Reply, Prompt, Reminder, Suggestion, System],
        Direction::Internal => &[Timer, System],
    };
    if !allowed.contains(&body.payload_kind) {
        return Err(InvalidRecord::KindMismatch {
            direction: body.direction,
            kind: body.payload_kind,
        });
    }
    match (body.direction, &body.actor) {
        (Direction::Inbound, Actor::Bot) => return Err(InvalidRecord::ActorMismatch(body.direction, "a tester")),
        (Direction::Outbound | Direction::Internal, Actor::Tester(_)) => {
            return Err(InvalidRecord::ActorMismatch(body.direction, "the bot"))
        }
        _ => {}
    }
    match body.payload_kind {
        Reply if body.correlation_id.is_none() => Err(InvalidRecord::MissingCorrelation(Reply)),
        Reminder | Suggestion if body.correlation_id.is_some() => {
            Err(InvalidRecord::UnexpectedCorrelation(body.payload_kind))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record rejected: {0}")]
    Invalid(#[from] InvalidRecord),
    #[error("audit log I/O failed on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("storage unavailable: {0}")]
    Unavailable(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selector {
    All,
    Session(SessionId),
    Channel(ChannelId),
    /// Half-open offset range.
    Offsets(Range<u64>),
}

pub trait EventStore {
    /// Appends a record, returning its offset. The record is durable when
    /// this returns.
    fn append(&mut self, body: RecordBody) -> Result<u64, StoreError>;

    /// Records matching `selector`, in offset order.
    fn query(&self, selector: &Selector) -> Result<Vec<EventRecord>, StoreError>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory store with per-session and per-channel indices.
#[derive(Clone, Debug, Default)]
pub struct MemoryStore {
    records: Vec<EventRecord>,
    by_session: HashMap<SessionId, Vec<usize>>,
    by_channel: HashMap<ChannelId, Vec<usize>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EventRecord> {
        self.records
    }

    fn check(&self, body: &RecordBody) -> Result<(), InvalidRecord> {
        validate(body)?;
        match body.correlation_id {
            Some(c) if c >= self.records.len() as u64 => Err(InvalidRecord::DanglingCorrelation(c)),
            _ => Ok(()),
        }
    }

    fn push(&mut self, body: RecordBody) -> u64 {
        let idx = self.records.len();
        if let Some(session) = &body.session_id {
            self.by_session.entry(session.clone()).or_default().push(idx);
        }
        self.by_channel.entry(body.channel_id.clone()).or_default().push(idx);
        let offset = idx as u64;
        self.records.push(EventRecord { offset, body });
        offset
    }
}

impl EventStore for MemoryStore {
    fn append(&mut self, body: RecordBody) -> Result<u64, StoreError> {
        self.check(&body)?;
        Ok(self.push(body))
    }

    fn query(&self, selector: &Selector) -> Result<Vec<EventRecord>, StoreError> {
        let pick = |idx: Option<&Vec<usize>>| {
            idx.map(|ids| ids.iter().map(|i| self.records[*i].clone()).collect())
                .unwrap_or_default()
        };
        Ok(match selector {
            Selector::All => self.records.clone(),
            Selector::Session(id) => pick(self.by_session.get(id)),
            Selector::Channel(id) => pick(self.by_channel.get(id)),
            Selector::Offsets(range) => {
                let len = self.records.len() as u64;
                let (start, end) = (range.start.min(len), range.end.min(len));
                if start >= end {
                    Vec::new()
                } else {
                    self.records[start as usize..end as usize].to_vec()
                }
            }
        })
    }

    fn len(&self) -> usize {
        self.records.len()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// Line-delimited JSON file store. Each append is written and synced to disk
/// before `append` returns.
#[derive(Debug)]
pub struct JsonlStore {
    path: PathBuf,
    file: File,
    memory: MemoryStore,
}

impl JsonlStore {
    /// Opens an existing log or creates a new one with a schema header.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        let exists = path.exists() && std::fs::metadata(&path).map_err(io)?.len() > 0;
        let memory = if exists {
            let mut memory = MemoryStore::new();
            for record in read_log(&path)? {
                memory.push(record.body);
            }
            memory
        } else {
            MemoryStore::new()
        };
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        if !exists {
            let header = serde_json::to_string(&Header {
                schema: SCHEMA_NAME.into(),
                version: SCHEMA_VERSION,
            })
            .expect("header serializes");
            writeln!(file, "{header}").and_then(|_| file.sync_data()).map_err(io)?;
        }
        Ok(Self { path, file, memory })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventStore for JsonlStore {
    fn append(&mut self, body: RecordBody) -> Result<u64, StoreError> {
        self.memory.check(&body)?;
        let record = EventRecord {
            offset: self.memory.len() as u64,
            body,
        };
        let line = serde_json::to_string(&record).expect("records serialize");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .and_then(|_| self.file.sync_data())
            .map_err(|source| StoreError::Io {
                path: self.path.clone(),
                source,
            })?;
        Ok(self.memory.push(record.body))
    }

    fn query(&self, selector: &Selector) -> Result<Vec<EventRecord>, StoreError> {
        self.memory.query(selector)
    }

    fn len(&self) -> usize {
        self.memory.len()
    }
}

/// Reads a whole log file, checking the header and offset sequence.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EventRecord>, StoreError> {
    let path = path.as_ref();
    let corrupt = |line: usize, message: String| StoreError::Corrupt {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?,
        None => return Ok(Vec::new()),
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| corrupt(1, format!("bad header: {e}")))?;
    if header.schema != SCHEMA_NAME || header.version != SCHEMA_VERSION {
        return Err(corrupt(
            1,
            format!(
                "unsupported schema {} v{} (expected {SCHEMA_NAME} v{SCHEMA_VERSION})",
                header.schema, header.version
            ),
        ));
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| corrupt(idx + 1, e.to_string()))?;
        if record.offset != records.len() as u64 {
            return Err(corrupt(
                idx + 1,
                format!("offset {} out of sequence (expected {})", record.offset, records.len()),
            ));
        }
        records.push(record);
    }
    Ok(records)
}
