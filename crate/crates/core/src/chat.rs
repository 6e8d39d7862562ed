//! Message and command vocabulary.
//!
//! Testers address the bot by starting a message with `?`. Everything else is
//! either a reply to an open dialog flow or ordinary chatter between testers.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Attachment, ChannelId, FlowId, Timestamp, UserId};

pub const COMMAND_PREFIX: char = '?';

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InboundMessage {
    pub channel_id: ChannelId,
    pub user_id: UserId,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
    pub timestamp: Timestamp,
}

impl InboundMessage {
    pub fn text(
        channel: impl Into<ChannelId>,
        user: impl Into<UserId>,
        text: impl Into<String>,
        at: Timestamp,
    ) -> Self {
        Self {
            channel_id: channel.into(),
            user_id: user.into(),
            text: text.into(),
            attachments: Vec::new(),
            timestamp: at,
        }
    }

    pub fn with_attachment(mut self, attachment: Attachment) -> Self {
        self.attachments.push(attachment);
        self
    }

    /// A message must carry text or at least one attachment.
    pub fn is_valid(&self) -> bool {
        !self.text.trim().is_empty() || !self.attachments.is_empty()
    }
}

impl From<String> for ChannelId {
    fn from(value: String) -> Self {
        ChannelId(value)
    }
}

impl From<String> for UserId {
    fn from(value: String) -> Self {
        UserId(value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandName {
    Commands,
    Manual,
    Charter,
    Start,
    Stop,
    Report,
    Help,
}

impl CommandName {
    /// Every command, in the order `?commands` lists them.
    pub const ALL: [CommandName; 7] = [
        CommandName::Commands,
        CommandName::Manual,
        CommandName::Charter,
        CommandName::Start,
        CommandName::Stop,
        CommandName::Report,
        CommandName::Help,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            CommandName::Commands => "commands",
            CommandName::Manual => "manual",
            CommandName::Charter => "charter",
            CommandName::Start => "start",
            CommandName::Stop => "stop",
            CommandName::Report => "report",
            CommandName::Help => "help",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            CommandName::Commands => "list every command I understand",
            CommandName::Manual => "step-by-step guide to how test sessions are organized",
            CommandName::Charter => "register a test charter (name, app, goals, attachments)",
            CommandName::Start => "start a time-boxed test session",
            CommandName::Stop => "end the active test session before its time limit",
            CommandName::Report => "report a bug or issue found during the session",
            CommandName::Help => "browse testing criteria, tours and mobile testing guidelines",
        }
    }

    pub fn from_keyword(word: &str) -> Option<CommandName> {
        let word = word.to_lowercase();
        CommandName::ALL.into_iter().find(|c| c.keyword() == word)
    }
}

impl fmt::Display for CommandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{COMMAND_PREFIX}{}", self.keyword())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParsedInput {
    Command {
        name: CommandName,
        argument: Option<String>,
    },
    InvalidCommand(String),
    FlowReply(String),
    Plain(String),
}

/// Classifies one chat message. Total and pure: every input maps to exactly
/// one variant.
pub fn parse_message(text: &str, awaiting_flow_input: bool) -> ParsedInput {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix(COMMAND_PREFIX) {
        let (word, argument) = match rest.split_once(char::is_whitespace) {
            Some((word, arg)) => (word, Some(arg.trim())),
            None => (rest, None),
        };
        return match CommandName::from_keyword(word) {
            Some(name) => ParsedInput::Command {
                name,
                argument: argument.filter(|a| !a.is_empty()).map(str::to_owned),
            },
            None => ParsedInput::InvalidCommand(trimmed.to_owned()),
        };
    }
    if awaiting_flow_input && !trimmed.is_empty() {
        ParsedInput::FlowReply(trimmed.to_owned())
    } else {
        ParsedInput::Plain(trimmed.to_owned())
    }
}

/// Closest known command to a misspelled keyword, if any is within two edits.
pub fn closest_command(raw: &str) -> Option<CommandName> {
    let word = raw
        .trim()
        .trim_start_matches(COMMAND_PREFIX)
        .split_whitespace()
        .next()
        .unwrap_or("")
        .to_lowercase();
    CommandName::ALL
        .into_iter()
        .map(|c| (edit_distance(&word, c.keyword()), c))
        .filter(|(d, _)| *d <= 2)
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c)
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != *cb);
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn render_command_list() -> String {
    let mut out = String::from("Here are the commands I accept:\n");
    for command in CommandName::ALL {
        out.push_str(&format!("  {:<10} {}\n", command.to_string(), command.description()));
    }
    out.push_str("Start every message to me with '?'.");
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManualError {
    #[error("manual text is empty")]
    Empty,
}

/// The step-by-step procedure shown by `?manual`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manual {
    text: String,
}

impl Manual {
    pub fn new(text: impl Into<String>) -> Result<Self, ManualError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ManualError::Empty);
        }
        Ok(Self { text })
    }

    pub fn render(&self) -> &str {
        &self.text
    }
}

impl Default for Manual {
    fn default() -> Self {
        Manual {
            text: include_str!("../assets/manual.txt").trim_end().to_owned(),
        }
    }
}

pub fn render_manual(manual: &Manual) -> &str {
    manual.render()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    Reply {
        text: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        attachments: Vec<Attachment>,
    },
    Prompt {
        text: String,
        flow_id: FlowId,
    },
    Reminder {
        text: String,
    },
    Suggestion {
        text: String,
        item_id: String,
    },
    SystemNotice {
        text: String,
    },
}

/// Something the bot says to a channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundAction {
    pub channel_id: ChannelId,
    #[serde(flatten)]
    pub kind: ActionKind,
}

impl OutboundAction {
    pub fn reply(channel: &ChannelId, text: impl Into<String>) -> Self {
        Self {
            channel_id: channel.clone(),
            kind: ActionKind::Reply {
                text: text.into(),
                attachments: Vec::new(),
            },
        }
    }

    pub fn prompt(channel: &ChannelId, text: impl Into<String>, flow_id: &FlowId) -> Self {
        Self {
            channel_id: channel.clone(),
            kind: ActionKind::Prompt {
                text: text.into(),
                flow_id: flow_id.clone(),
            },
        }
    }

    pub fn notice(channel: &ChannelId, text: impl Into<String>) -> Self {
        Self {
            channel_id: channel.clone(),
            kind: ActionKind::SystemNotice { text: text.into() },
        }
    }

    pub fn text(&self) -> &str {
        match &self.kind {
            ActionKind::Reply { text, .. }
            | ActionKind::Prompt { text, .. }
            | ActionKind::Reminder { text }
            | ActionKind::Suggestion { text, .. }
            | ActionKind::SystemNotice { text } => text,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ActionKind::Reply { .. } => "reply",
            ActionKind::Prompt { .. } => "prompt",
            ActionKind::Reminder { .. } => "reminder",
            ActionKind::Suggestion { .. } => "suggestion",
            ActionKind::SystemNotice { .. } => "notice",
        }
    }

    pub fn flow_id(&self) -> Option<&FlowId> {
        match &self.kind {
            ActionKind::Prompt { flow_id, .. } => Some(flow_id),
            _ => None,
        }
    }
}
