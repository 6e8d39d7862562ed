//! Conversational engine for chat-driven exploratory test sessions.
//!
//! Testers talk to the bot with `?`-prefixed commands to register charters,
//! run time-boxed sessions, report bugs and browse testing knowledge. The
//! engine is a pure per-channel state machine driven by a virtual clock;
//! [`runtime::Runtime`] hosts it over an append-only [`store::EventStore`],
//! and [`analytics`] measures the resulting interaction log.

pub mod analytics;
pub mod chat;
pub mod dialog;
pub mod knowledge;
pub mod runtime;
pub mod session;
pub mod store;
pub mod types;

pub use chat::{ActionKind, CommandName, InboundMessage, OutboundAction, ParsedInput};
pub use dialog::{Engine, EngineConfig, EngineState, Event};
pub use knowledge::Catalog;
pub use runtime::{Delivery, Runtime, RuntimeError};
pub use store::{EventRecord, EventStore, JsonlStore, MemoryStore};
pub use types::{Attachment, ChannelId, MediaKind, Timestamp, UserId};
