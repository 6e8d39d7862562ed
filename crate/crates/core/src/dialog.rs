//! Per-channel conversation state machine.
//!
//! [`Engine::handle_event`] is a pure transition: the same state and event
//! always produce the same next state, outbound actions and facts. Hosting
//! code is responsible for logging and delivery (see [`crate::runtime`]).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{
    closest_command, parse_message, render_command_list, ActionKind, CommandName, InboundMessage, Manual,
    OutboundAction, ParsedInput,
};
use crate::knowledge::Catalog;
use crate::session::{
    next_suggestion_time, parse_duration_minutes, pick_suggestion, start_session, EndReason, Policies, SchedulerRng,
    Session, TimerEvent, TimerKind,
};
use crate::store::PayloadKind;
use crate::types::{format_span, Attachment, ChannelId, CharterId, FlowId, ReportId, SessionId, Timestamp, UserId};

pub const CANCEL_KEYWORD: &str = "cancel";
pub const FINISH_KEYWORDS: [&str; 2] = ["done", "finish"];

const INTRODUCTION: &str = "Hello! I'm etbot, your exploratory testing assistant. \
Talk to me by starting a message with '?'. Type ?manual to learn how a test session works, \
?commands to see everything I can do and ?help for testing tips.";

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub catalog: Arc<Catalog>,
    pub manual: Manual,
    pub policies: Policies,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            catalog: Arc::new(Catalog::seed()),
            manual: Manual::default(),
            policies: Policies::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportType {
    Bug,
    Issue,
}

impl ReportType {
    fn parse(text: &str) -> Option<ReportType> {
        match text.trim().to_lowercase().as_str() {
            "bug" => Some(ReportType::Bug),
            "issue" => Some(ReportType::Issue),
            _ => None,
        }
    }
}

impl fmt::Display for ReportType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportType::Bug => "bug",
            ReportType::Issue => "issue",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Charter {
    pub charter_id: CharterId,
    pub name: String,
    pub app_name: String,
    pub goals: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
    pub created_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: ReportId,
    pub session_id: SessionId,
    pub charter_id: CharterId,
    pub report_type: ReportType,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
    pub reported_at: Timestamp,
    pub reported_by: UserId,
    /// Completed after the session it belongs to had ended.
    #[serde(default)]
    pub late: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharterDraft {
    pub name: String,
    pub app_name: String,
    pub goals: String,
    pub attachments: Vec<Attachment>,
    pub created_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportDraft {
    pub session_id: SessionId,
    pub charter_id: CharterId,
    pub report_type: ReportType,
    pub description: String,
    pub attachments: Vec<Attachment>,
    pub reported_at: Timestamp,
    pub reported_by: UserId,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CharterError {
    #[error("a charter named {0:?} already exists")]
    DuplicateName(String),
    #[error("the charter {0} cannot be empty")]
    EmptyField(&'static str),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("unknown charter {0}")]
    UnknownCharter(CharterId),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("the report description cannot be empty")]
    EmptyDescription,
}

/// Durable side effects of a transition, logged as internal records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fact", rename_all = "snake_case")]
pub enum Fact {
    CharterRegistered(Charter),
    ReportFiled(Report),
    SessionStarted {
        session_id: SessionId,
        started_at: Timestamp,
        duration_ms: u64,
    },
    SessionEnded {
        session_id: SessionId,
        ended_at: Timestamp,
        reason: EndReason,
    },
    SuggestionDeferred {
        session_id: SessionId,
    },
    SuggestionDropped {
        session_id: SessionId,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    CharterFlow,
    ReportFlow,
    StartFlow,
    HelpFlow,
}

impl FlowKind {
    fn activity(self) -> &'static str {
        match self {
            FlowKind::CharterFlow => "registering a charter",
            FlowKind::ReportFlow => "reporting a bug or issue",
            FlowKind::StartFlow => "starting a session",
            FlowKind::HelpFlow => "choosing a help topic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowStep {
    CharterName,
    CharterApp,
    CharterGoals,
    CharterAttachments,
    ReportCharter,
    ReportType,
    ReportDescription,
    ReportAttachments,
    StartDuration,
    HelpTopic,
}

impl FlowStep {
    pub fn kind(self) -> FlowKind {
        match self {
            FlowStep::CharterName | FlowStep::CharterApp | FlowStep::CharterGoals | FlowStep::CharterAttachments => {
                FlowKind::CharterFlow
            }
            FlowStep::ReportCharter
            | FlowStep::ReportType
            | FlowStep::ReportDescription
            | FlowStep::ReportAttachments => FlowKind::ReportFlow,
            FlowStep::StartDuration => FlowKind::StartFlow,
            FlowStep::HelpTopic => FlowKind::HelpFlow,
        }
    }

    fn accepts_attachments(self) -> bool {
        self.kind() == FlowKind::CharterFlow || self.kind() == FlowKind::ReportFlow
    }
}

/// Fields gathered so far by an open flow.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Collected {
    pub name: Option<String>,
    pub app_name: Option<String>,
    pub goals: Option<String>,
    pub charter_id: Option<CharterId>,
    pub report_type: Option<ReportType>,
    pub description: Option<String>,
    pub attachments: Vec<Attachment>,
    pub session_id: Option<SessionId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowState {
    pub flow_id: FlowId,
    pub step: FlowStep,
    pub collected: Collected,
    pub started_at: Timestamp,
    pub opened_by: UserId,
}

impl FlowState {
    pub fn kind(&self) -> FlowKind {
        self.step.kind()
    }
}

/// A tester's answer to the open flow's prompt.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlowInput {
    pub text: Option<String>,
    pub attachments: Vec<Attachment>,
}

impl FlowInput {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            attachments: Vec::new(),
        }
    }

    pub fn attachment(attachment: Attachment) -> Self {
        Self {
            text: None,
            attachments: vec![attachment],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowResult {
    Charter(CharterDraft),
    Report(ReportDraft),
    Start { minutes: f64 },
    Help { item_id: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowAdvance {
    /// The flow stays open; `action` is the next prompt or a re-prompt.
    Next {
        flow: FlowState,
        action: OutboundAction,
    },
    Cancelled {
        action: OutboundAction,
    },
    Complete(FlowResult),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct IdCounters {
    charter: u64,
    report: u64,
    session: u64,
    flow: u64,
}

/// Conversation state of one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineState {
    pub channel_id: ChannelId,
    pub introduced: bool,
    pub open_flow: Option<FlowState>,
    /// Registered charters, in registration order.
    pub charters: Vec<Charter>,
    pub reports: Vec<Report>,
    pub sessions: Vec<Session>,
    pub active_session: Option<SessionId>,
    rng: SchedulerRng,
    counters: IdCounters,
    catalog_notice_sent: bool,
}

impl EngineState {
    pub fn new(channel_id: ChannelId, seed: u64) -> Self {
        let rng = SchedulerRng::seeded(seed ^ fnv1a(channel_id.as_str().as_bytes()));
        Self {
            channel_id,
            introduced: false,
            open_flow: None,
            charters: Vec::new(),
            reports: Vec::new(),
            sessions: Vec::new(),
            active_session: None,
            rng,
            counters: IdCounters::default(),
            catalog_notice_sent: false,
        }
    }

    pub fn charter(&self, id: &CharterId) -> Option<&Charter> {
        self.charters.iter().find(|c| &c.charter_id == id)
    }

    pub fn charter_by_name(&self, name: &str) -> Option<&Charter> {
        self.charters.iter().find(|c| c.name == name)
    }

    pub fn session(&self, id: &SessionId) -> Option<&Session> {
        self.sessions.iter().find(|s| &s.session_id == id)
    }

    pub fn active(&self) -> Option<&Session> {
        let id = self.active_session.as_ref()?;
        self.session(id).filter(|s| s.is_active())
    }

    fn active_mut(&mut self) -> Option<&mut Session> {
        let id = self.active_session.clone()?;
        self.sessions.iter_mut().find(|s| s.session_id == id && s.is_active())
    }

    fn charter_names(&self) -> String {
        self.charters
            .iter()
            .map(|c| format!("\"{}\"", c.name))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn next_id(&mut self, kind: char) -> String {
        let counter = match kind {
            'c' => &mut self.counters.charter,
            'r' => &mut self.counters.report,
            's' => &mut self.counters.session,
            _ => &mut self.counters.flow,
        };
        *counter += 1;
        format!("{}:{}{}", self.channel_id, kind, counter)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Stores a completed charter draft.
pub fn register_charter(state: &EngineState, draft: CharterDraft) -> Result<(EngineState, CharterId), CharterError> {
    let name = draft.name.trim();
    for (field, value) in [
        ("name", name),
        ("app name", draft.app_name.trim()),
        ("goals", draft.goals.trim()),
    ] {
        if value.is_empty() {
            return Err(CharterError::EmptyField(field));
        }
    }
    if state.charter_by_name(name).is_some() {
        return Err(CharterError::DuplicateName(name.to_owned()));
    }
    let mut next = state.clone();
    let charter_id = CharterId(next.next_id('c'));
    next.charters.push(Charter {
        charter_id: charter_id.clone(),
        name: name.to_owned(),
        app_name: draft.app_name.trim().to_owned(),
        goals: draft.goals.trim().to_owned(),
        attachments: draft.attachments,
        created_at: draft.created_at,
    });
    Ok((next, charter_id))
}

/// Stores a completed report draft. A report whose session has already ended
/// is accepted and flagged late.
pub fn file_report(state: &EngineState, draft: ReportDraft) -> Result<(EngineState, ReportId), ReportError> {
    if state.charter(&draft.charter_id).is_none() {
        return Err(ReportError::UnknownCharter(draft.charter_id));
    }
    let session = state
        .session(&draft.session_id)
        .ok_or_else(|| ReportError::UnknownSession(draft.session_id.clone()))?;
    if draft.description.trim().is_empty() {
        return Err(ReportError::EmptyDescription);
    }
    let late = !session.is_active();
    let mut next = state.clone();
    let report_id = ReportId(next.next_id('r'));
    next.reports.push(Report {
        report_id: report_id.clone(),
        session_id: draft.session_id,
        charter_id: draft.charter_id,
        report_type: draft.report_type,
        description: draft.description.trim().to_owned(),
        attachments: draft.attachments,
        reported_at: draft.reported_at,
        reported_by: draft.reported_by,
        late,
    });
    Ok((next, report_id))
}

fn is_keyword(text: &str, keyword: &str) -> bool {
    text.trim().eq_ignore_ascii_case(keyword)
}

fn step_prompt(step: FlowStep, collected: &Collected, state: &EngineState) -> String {
    match step {
        FlowStep::CharterName => "Let's register a charter. What is the charter name?".into(),
        FlowStep::CharterApp => "Which app will be tested under this charter?".into(),
        FlowStep::CharterGoals => "Describe the goals to achieve in this charter.".into(),
        FlowStep::CharterAttachments => {
            "Attach images or other files related to this charter, or type \"done\" to finish.".into()
        }
        FlowStep::ReportCharter => format!(
            "Which charter is this report about? Registered charters: {}",
            state.charter_names()
        ),
        FlowStep::ReportType => "Is it a bug or an issue?".into(),
        FlowStep::ReportDescription => format!(
            "Describe the {} in detail: what you did, what you expected and what happened.",
            collected.report_type.unwrap_or(ReportType::Bug)
        ),
        FlowStep::ReportAttachments => {
            "Attach screenshots or other files if you have any, then type \"done\" to submit the report.".into()
        }
        FlowStep::StartDuration => "What is the time limit for this session, in minutes?".into(),
        FlowStep::HelpTopic => String::new(),
    }
}

/// Advances an open flow by one tester reply.
pub fn advance_flow(flow: &FlowState, input: &FlowInput, context: &EngineState, catalog: &Catalog) -> FlowAdvance {
    let channel = &context.channel_id;
    let text = input.text.as_deref().map(str::trim).filter(|t| !t.is_empty());

    if text.is_some_and(|t| is_keyword(t, CANCEL_KEYWORD)) {
        return FlowAdvance::Cancelled {
            action: OutboundAction::reply(
                channel,
                format!("Cancelled {}. Nothing was saved.", flow.kind().activity()),
            ),
        };
    }

    let mut next = flow.clone();
    if flow.step.accepts_attachments() {
        next.collected
            .attachments
            .extend(input.attachments.iter().filter(|a| a.is_valid()).cloned());
    }
    let stay = |next: FlowState, text: String| FlowAdvance::Next {
        action: OutboundAction::prompt(channel, text, &next.flow_id),
        flow: next,
    };
    let advance = |mut next: FlowState, step: FlowStep| {
        next.step = step;
        let prompt = step_prompt(step, &next.collected, context);
        stay(next, prompt)
    };

    let Some(text) = text else {
        let prompt = step_prompt(flow.step, &next.collected, context);
        return match flow.step {
            FlowStep::CharterAttachments | FlowStep::ReportAttachments => {
                let n = next.collected.attachments.len();
                let what = if flow.kind() == FlowKind::ReportFlow {
                    "submit the report"
                } else {
                    "finish"
                };
                stay(
                    next,
                    format!("Got {n} attachment(s). Attach more or type \"done\" to {what}."),
                )
            }
            FlowStep::HelpTopic => stay(next, "Please reply with one of the keys listed by ?help.".into()),
            _ => stay(next, format!("Please answer with text. {prompt}")),
        };
    };

    match flow.step {
        FlowStep::CharterName => {
            if context.charter_by_name(text).is_some() {
                return stay(
                    next,
                    format!("A charter named \"{text}\" already exists. Please choose another name."),
                );
            }
            next.collected.name = Some(text.to_owned());
            advance(next, FlowStep::CharterApp)
        }
        FlowStep::CharterApp => {
            next.collected.app_name = Some(text.to_owned());
            advance(next, FlowStep::CharterGoals)
        }
        FlowStep::CharterGoals => {
            next.collected.goals = Some(text.to_owned());
            advance(next, FlowStep::CharterAttachments)
        }
        FlowStep::ReportCharter => match context.charter_by_name(text) {
            Some(charter) => {
                next.collected.charter_id = Some(charter.charter_id.clone());
                advance(next, FlowStep::ReportType)
            }
            None => stay(
                next,
                format!(
                    "I couldn't find a charter named \"{text}\". Registered charters: {}. Which one?",
                    context.charter_names()
                ),
            ),
        },
        FlowStep::ReportType => match ReportType::parse(text) {
            Some(kind) => {
                next.collected.report_type = Some(kind);
                advance(next, FlowStep::ReportDescription)
            }
            None => stay(next, "Please answer \"bug\" or \"issue\".".into()),
        },
        FlowStep::ReportDescription => {
            next.collected.description = Some(text.to_owned());
            advance(next, FlowStep::ReportAttachments)
        }
        FlowStep::CharterAttachments | FlowStep::ReportAttachments => {
            if FINISH_KEYWORDS.iter().any(|k| is_keyword(text, k)) {
                FlowAdvance::Complete(finish(&next))
            } else {
                let prompt = step_prompt(flow.step, &next.collected, context);
                if input.attachments.is_empty() {
                    stay(next, prompt)
                } else {
                    let n = next.collected.attachments.len();
                    stay(next, format!("Got {n} attachment(s). {prompt}"))
                }
            }
        }
        FlowStep::StartDuration => match parse_duration_minutes(text) {
            Ok(minutes) => FlowAdvance::Complete(FlowResult::Start { minutes }),
            Err(_) => stay(
                next,
                "The time limit must be a positive number of minutes, for example 15. \
                 What is the time limit for this session, in minutes?"
                    .into(),
            ),
        },
        FlowStep::HelpTopic => match catalog.lookup(text) {
            Ok(item) => FlowAdvance::Complete(FlowResult::Help {
                item_id: item.item_id.clone(),
            }),
            Err(err) => stay(next, unknown_topic(&err.key, &err.nearest)),
        },
    }
}

fn finish(flow: &FlowState) -> FlowResult {
    let c = &flow.collected;
    let at = flow.started_at;
    match flow.kind() {
        FlowKind::CharterFlow => FlowResult::Charter(CharterDraft {
            name: c.name.clone().unwrap_or_default(),
            app_name: c.app_name.clone().unwrap_or_default(),
            goals: c.goals.clone().unwrap_or_default(),
            attachments: c.attachments.clone(),
            created_at: at,
        }),
        _ => FlowResult::Report(ReportDraft {
            session_id: c.session_id.clone().unwrap_or_else(|| SessionId::new("")),
            charter_id: c.charter_id.clone().unwrap_or_else(|| CharterId::new("")),
            report_type: c.report_type.unwrap_or(ReportType::Bug),
            description: c.description.clone().unwrap_or_default(),
            attachments: c.attachments.clone(),
            reported_at: at,
            reported_by: flow.opened_by.clone(),
        }),
    }
}

fn unknown_topic(key: &str, nearest: &[String]) -> String {
    if nearest.is_empty() {
        format!(
            "I don't have a resource called \"{key}\". Reply with one of the keys listed by ?help, or type \"cancel\"."
        )
    } else {
        format!(
            "I don't have a resource called \"{key}\". Did you mean: {}? Reply with one of the keys, or type \"cancel\".",
            nearest.join(", ")
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Message(InboundMessage),
    Timer(TimerEvent),
}

impl Event {
    pub fn timestamp(&self) -> Timestamp {
        match self {
            Event::Message(m) => m.timestamp,
            Event::Timer(t) => t.due_at,
        }
    }
}

/// Output of one engine step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: EngineState,
    /// How the inbound message was understood; `None` for timer events.
    pub inbound_kind: Option<PayloadKind>,
    /// Flow the inbound message answered, if any.
    pub inbound_flow: Option<FlowId>,
    pub facts: Vec<Fact>,
    pub actions: Vec<OutboundAction>,
}

#[derive(Default)]
struct Output {
    facts: Vec<Fact>,
    actions: Vec<OutboundAction>,
}

#[derive(Clone, Debug)]
pub struct Engine {
    config: EngineConfig,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn initial_state(&self, channel_id: ChannelId) -> EngineState {
        EngineState::new(channel_id, self.config.seed)
    }

    /// Removes the earliest timer event of the channel's active session that
    /// is due at or before `now`.
    pub fn pop_due_timer(&self, state: &mut EngineState, now: Timestamp) -> Option<TimerEvent> {
        state.active_mut()?.pop_due(now)
    }

    pub fn handle_event(&self, state: &EngineState, event: &Event) -> Transition {
        let mut next = state.clone();
        let mut out = Output::default();
        let (inbound_kind, inbound_flow) = match event {
            Event::Message(msg) => {
                let flow = next.open_flow.as_ref().map(|f| f.flow_id.clone());
                let kind = self.on_message(&mut next, msg, &mut out);
                let flow = flow.filter(|_| kind == PayloadKind::FlowReply);
                (Some(kind), flow)
            }
            Event::Timer(timer) => {
                self.on_timer(&mut next, timer, &mut out);
                (None, None)
            }
        };
        Transition {
            state: next,
            inbound_kind,
            inbound_flow,
            facts: out.facts,
            actions: out.actions,
        }
    }

    fn on_message(&self, st: &mut EngineState, msg: &InboundMessage, out: &mut Output) -> PayloadKind {
        let channel = st.channel_id.clone();
        if !st.introduced {
            st.introduced = true;
            out.actions.push(OutboundAction::notice(&channel, INTRODUCTION));
        }
        let awaiting = st.open_flow.is_some();
        match parse_message(&msg.text, awaiting) {
            ParsedInput::Command { name, argument } => {
                self.on_command(st, msg, name, argument.as_deref(), out);
                PayloadKind::Command
            }
            ParsedInput::InvalidCommand(raw) => {
                let hint = closest_command(&raw)
                    .map(|c| format!(" Did you mean {c}?"))
                    .unwrap_or_default();
                out.actions.push(OutboundAction::reply(
                    &channel,
                    format!("I don't know the command \"{raw}\".{hint} Type ?commands to see the commands I accept."),
                ));
                PayloadKind::InvalidCommand
            }
            ParsedInput::FlowReply(text) => {
                let input = FlowInput {
                    text: Some(text),
                    attachments: msg.attachments.clone(),
                };
                self.on_flow_input(st, msg, &input, out);
                PayloadKind::FlowReply
            }
            ParsedInput::Plain(_) if awaiting && !msg.attachments.is_empty() => {
                let input = FlowInput {
                    text: None,
                    attachments: msg.attachments.clone(),
                };
                self.on_flow_input(st, msg, &input, out);
                PayloadKind::FlowReply
            }
            ParsedInput::Plain(_) => PayloadKind::Plain,
        }
    }

    fn open_flow(&self, st: &mut EngineState, step: FlowStep, msg: &InboundMessage, prompt: String, out: &mut Output) {
        let flow_id = FlowId(st.next_id('f'));
        let collected = Collected {
            session_id: st
                .active_session
                .clone()
                .filter(|_| step.kind() == FlowKind::ReportFlow),
            ..Collected::default()
        };
        out.actions
            .push(OutboundAction::prompt(&st.channel_id, prompt, &flow_id));
        st.open_flow = Some(FlowState {
            flow_id,
            step,
            collected,
            started_at: msg.timestamp,
            opened_by: msg.user_id.clone(),
        });
    }

    fn collision(&self, st: &EngineState, out: &mut Output) -> bool {
        match &st.open_flow {
            Some(flow) => {
                out.actions.push(OutboundAction::reply(
                    &st.channel_id,
                    format!(
                        "You are still {}. Finish it first or type \"{CANCEL_KEYWORD}\" to abandon it.",
                        flow.kind().activity()
                    ),
                ));
                true
            }
            None => false,
        }
    }

    fn on_command(
        &self,
        st: &mut EngineState,
        msg: &InboundMessage,
        name: CommandName,
        argument: Option<&str>,
        out: &mut Output,
    ) {
        let channel = st.channel_id.clone();
        let now = msg.timestamp;
        match name {
            CommandName::Commands => out.actions.push(OutboundAction::reply(&channel, render_command_list())),
            CommandName::Manual => out
                .actions
                .push(OutboundAction::reply(&channel, self.config.manual.render())),
            CommandName::Charter => {
                if !self.collision(st, out) {
                    let prompt = step_prompt(FlowStep::CharterName, &Collected::default(), st);
                    self.open_flow(st, FlowStep::CharterName, msg, prompt, out);
                }
            }
            CommandName::Start => {
                if let Some(active) = st.active() {
                    out.actions.push(OutboundAction::reply(
                        &channel,
                        format!(
                            "Session {} is already running ({} left). Type ?stop to end it early.",
                            active.session_id,
                            format_span(active.remaining_ms(now))
                        ),
                    ));
                } else if !self.collision(st, out) {
                    let prompt = step_prompt(FlowStep::StartDuration, &Collected::default(), st);
                    self.open_flow(st, FlowStep::StartDuration, msg, prompt, out);
                }
            }
            CommandName::Stop => {
                let Some(session) = st.active().cloned() else {
                    out.actions.push(OutboundAction::reply(
                        &channel,
                        "There is no active test session to stop.",
                    ));
                    return;
                };
                self.end_session(st, &session.session_id, now, EndReason::Stopped, out);
                out.actions.push(OutboundAction::reply(
                    &channel,
                    format!(
                        "Session {} stopped after {}. {}",
                        session.session_id,
                        format_span(now.millis_since(session.started_at)),
                        report_summary(st, &session.session_id)
                    ),
                ));
            }
            CommandName::Report => {
                if st.active().is_none() {
                    out.actions.push(OutboundAction::reply(
                        &channel,
                        "There is no active test session. Type ?start to begin one before reporting bugs or issues.",
                    ));
                } else if st.open_flow.is_some() {
                    self.collision(st, out);
                } else if st.charters.is_empty() {
                    out.actions.push(OutboundAction::reply(
                        &channel,
                        "No charter is registered yet. Type ?charter to register one, then ?report again.",
                    ));
                } else {
                    let prompt = step_prompt(FlowStep::ReportCharter, &Collected::default(), st);
                    self.open_flow(st, FlowStep::ReportCharter, msg, prompt, out);
                }
            }
            CommandName::Help => match argument {
                Some(topic) => match self.config.catalog.lookup(topic) {
                    Ok(item) => out.actions.push(OutboundAction::reply(&channel, item.render())),
                    Err(err) if st.open_flow.is_some() => out
                        .actions
                        .push(OutboundAction::reply(&channel, unknown_topic(&err.key, &err.nearest))),
                    Err(err) => {
                        let prompt = unknown_topic(&err.key, &err.nearest);
                        self.open_flow(st, FlowStep::HelpTopic, msg, prompt, out);
                    }
                },
                None => {
                    if !self.collision(st, out) {
                        let listing = self.config.catalog.list_topics();
                        self.open_flow(st, FlowStep::HelpTopic, msg, listing, out);
                    }
                }
            },
        }
    }

    fn on_flow_input(&self, st: &mut EngineState, msg: &InboundMessage, input: &FlowInput, out: &mut Output) {
        let Some(flow) = st.open_flow.clone() else {
            return;
        };
        let channel = st.channel_id.clone();
        match advance_flow(&flow, input, st, &self.config.catalog) {
            FlowAdvance::Next { flow, action } => {
                st.open_flow = Some(flow);
                out.actions.push(action);
            }
            FlowAdvance::Cancelled { action } => {
                st.open_flow = None;
                out.actions.push(action);
                self.flush_deferred(st, msg.timestamp, out);
            }
            FlowAdvance::Complete(result) => {
                st.open_flow = None;
                match result {
                    FlowResult::Charter(draft) => match register_charter(st, draft) {
                        Ok((next, id)) => {
                            *st = next;
                            let charter = st.charter(&id).cloned().expect("just registered");
                            out.actions.push(OutboundAction::reply(
                                &channel,
                                format!(
                                    "Charter \"{}\" registered as {} (app: {}, {} attachment(s)).",
                                    charter.name,
                                    charter.charter_id,
                                    charter.app_name,
                                    charter.attachments.len()
                                ),
                            ));
                            out.facts.push(Fact::CharterRegistered(charter));
                        }
                        Err(err) => {
                            // Name was taken while the flow was open: ask again.
                            let mut retry = flow.clone();
                            retry.step = FlowStep::CharterName;
                            retry.collected.name = None;
                            out.actions.push(OutboundAction::prompt(
                                &channel,
                                format!("{err}. What is the charter name?"),
                                &retry.flow_id,
                            ));
                            st.open_flow = Some(retry);
                        }
                    },
                    FlowResult::Report(mut draft) => {
                        draft.reported_at = msg.timestamp;
                        match file_report(st, draft) {
                            Ok((next, id)) => {
                                *st = next;
                                let report = st.reports.last().cloned().expect("just filed");
                                debug_assert_eq!(report.report_id, id);
                                let charter = st
                                    .charter(&report.charter_id)
                                    .map(|c| c.name.clone())
                                    .unwrap_or_default();
                                let mut text = format!(
                                    "{} report {} registered for charter \"{}\". Thanks!",
                                    capitalize(&report.report_type.to_string()),
                                    report.report_id,
                                    charter
                                );
                                if report.late {
                                    text.push_str(" The session had already ended, so it is flagged as late.");
                                }
                                out.facts.push(Fact::ReportFiled(report));
                                out.actions.push(OutboundAction::reply(&channel, text));
                            }
                            Err(err) => out.actions.push(OutboundAction::reply(
                                &channel,
                                format!("The report could not be saved: {err}."),
                            )),
                        }
                    }
                    FlowResult::Start { minutes } => self.begin_session(st, minutes, msg.timestamp, out),
                    FlowResult::Help { item_id } => {
                        let text = self
                            .config
                            .catalog
                            .get(&item_id)
                            .map(|i| i.render())
                            .unwrap_or_default();
                        out.actions.push(OutboundAction::reply(&channel, text));
                    }
                }
                self.flush_deferred(st, msg.timestamp, out);
            }
        }
    }

    fn begin_session(&self, st: &mut EngineState, minutes: f64, now: Timestamp, out: &mut Output) {
        let channel = st.channel_id.clone();
        let session_id = SessionId(st.next_id('s'));
        let active = st.active().cloned();
        match start_session(
            active.as_ref(),
            session_id,
            channel.clone(),
            minutes,
            now,
            &self.config.policies,
            &mut st.rng,
        ) {
            Ok(session) => {
                out.facts.push(Fact::SessionStarted {
                    session_id: session.session_id.clone(),
                    started_at: session.started_at,
                    duration_ms: session.duration_ms,
                });
                out.actions.push(OutboundAction::reply(
                    &channel,
                    format!(
                        "Session {} started with a time limit of {}. I will remind you about the remaining time. Happy testing!",
                        session.session_id,
                        format_span(session.duration_ms)
                    ),
                ));
                st.active_session = Some(session.session_id.clone());
                st.sessions.push(session);
            }
            Err(err) => out.actions.push(OutboundAction::reply(
                &channel,
                format!("Could not start the session: {err}."),
            )),
        }
    }

    fn end_session(&self, st: &mut EngineState, id: &SessionId, at: Timestamp, reason: EndReason, out: &mut Output) {
        if let Some(session) = st.active_mut() {
            if session.take_deferred() {
                out.facts.push(Fact::SuggestionDropped { session_id: id.clone() });
            }
            session.end(at, reason);
        }
        st.active_session = None;
        out.facts.push(Fact::SessionEnded {
            session_id: id.clone(),
            ended_at: at,
            reason,
        });
    }

    fn on_timer(&self, st: &mut EngineState, timer: &TimerEvent, out: &mut Output) {
        let Some(session) = st.active().filter(|s| s.session_id == timer.session_id).cloned() else {
            return;
        };
        let channel = st.channel_id.clone();
        let now = timer.due_at;
        match timer.kind {
            TimerKind::ReminderDue { fraction } if fraction >= 1.0 => {
                out.actions.push(reminder(
                    &channel,
                    format!(
                        "Time is up! Session {} has ended. {}",
                        session.session_id,
                        report_summary(st, &session.session_id)
                    ),
                ));
            }
            TimerKind::ReminderDue { .. } => {
                out.actions.push(reminder(
                    &channel,
                    format!(
                        "Time check: {} left in this session ({} elapsed).",
                        format_span(session.remaining_ms(now)),
                        format_span(now.millis_since(session.started_at))
                    ),
                ));
            }
            TimerKind::SuggestionDue => {
                if st.open_flow.is_some() {
                    if let Some(s) = st.active_mut() {
                        s.defer_suggestion();
                    }
                    out.facts.push(Fact::SuggestionDeferred {
                        session_id: session.session_id.clone(),
                    });
                } else {
                    self.deliver_suggestion(st, now, out);
                }
            }
            TimerKind::SessionExpired => {
                self.end_session(st, &session.session_id, now, EndReason::Expired, out);
            }
        }
    }

    fn flush_deferred(&self, st: &mut EngineState, now: Timestamp, out: &mut Output) {
        if st.open_flow.is_some() {
            return;
        }
        if st.active_mut().is_some_and(|s| s.take_deferred()) {
            self.deliver_suggestion(st, now, out);
        }
    }

    fn deliver_suggestion(&self, st: &mut EngineState, now: Timestamp, out: &mut Output) {
        let catalog = &self.config.catalog;
        let Some(item) = pick_suggestion(&mut st.rng, catalog) else {
            if !st.catalog_notice_sent {
                st.catalog_notice_sent = true;
                out.actions.push(OutboundAction::notice(
                    &st.channel_id,
                    "The knowledge catalog is empty, so I have no testing tips to suggest.",
                ));
            }
            return;
        };
        out.actions.push(OutboundAction {
            channel_id: st.channel_id.clone(),
            kind: ActionKind::Suggestion {
                text: format!("Testing tip: {}", item.render()),
                item_id: item.item_id.clone(),
            },
        });
        let next = next_suggestion_time(&mut st.rng, &self.config.policies.suggestions, now);
        if let Some(session) = st.active_mut() {
            session.schedule_suggestion(next);
        }
    }
}

fn reminder(channel: &ChannelId, text: String) -> OutboundAction {
    OutboundAction {
        channel_id: channel.clone(),
        kind: ActionKind::Reminder { text },
    }
}

fn report_summary(st: &EngineState, session: &SessionId) -> String {
    let count = |kind| {
        st.reports
            .iter()
            .filter(|r| &r.session_id == session && r.report_type == kind)
            .count()
    };
    format!(
        "Reports filed: {} bug(s), {} issue(s).",
        count(ReportType::Bug),
        count(ReportType::Issue)
    )
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MediaKind;

    struct Harness {
        engine: Engine,
        state: EngineState,
        now: Timestamp,
    }

    impl Harness {
        fn new() -> Self {
            let engine = Engine::new(EngineConfig::default());
            let state = engine.initial_state(ChannelId::new("c"));
            Self {
                engine,
                state,
                now: Timestamp::ZERO,
            }
        }

        fn step(&mut self, event: Event) -> Transition {
            let t = self.engine.handle_event(&self.state, &event);
            self.state = t.state.clone();
            t
        }

        fn say(&mut self, text: &str) -> Vec<OutboundAction> {
            let msg = InboundMessage::text("c", "beth", text, self.now);
            self.step(Event::Message(msg)).actions
        }

        fn attach(&mut self, name: &str) -> Vec<OutboundAction> {
            let msg = InboundMessage::text("c", "beth", "", self.now).with_attachment(Attachment::new(
                name,
                MediaKind::Image,
                format!("up/{name}"),
                1024,
            ));
            self.step(Event::Message(msg)).actions
        }

        fn advance(&mut self, secs: u64) -> Vec<OutboundAction> {
            self.now = self.now.plus_secs(secs);
            let mut actions = Vec::new();
            while let Some(timer) = self.engine.pop_due_timer(&mut self.state, self.now) {
                actions.extend(self.step(Event::Timer(timer)).actions);
            }
            actions
        }

        fn register(&mut self, name: &str) {
            self.say("?charter");
            self.say(name);
            self.say("Reminders");
            self.say("Explore reminder creation");
            self.say("done");
        }

        fn start(&mut self, minutes: &str) {
            self.say("?start");
            self.say(minutes);
        }
    }

    #[test]
    fn first_message_introduces_once() {
        let mut h = Harness::new();
        let first = h.say("hi all");
        assert_eq!(first.len(), 1);
        assert!(matches!(first[0].kind, ActionKind::SystemNotice { .. }));
        assert!(first[0].text().contains("Hello"));
        assert!(h.say("hello again").is_empty());
        assert!(!h.say("?commands")[0].text().contains("Hello"));
    }

    #[test]
    fn commands_reply_leaves_state_unchanged() {
        let mut h = Harness::new();
        h.say("hi");
        let before = h.state.clone();
        let actions = h.say("?commands");
        assert_eq!(actions.len(), 1);
        assert!(matches!(actions[0].kind, ActionKind::Reply { .. }));
        assert_eq!(actions[0].text(), render_command_list());
        assert_eq!(h.state, before);
    }

    #[test]
    fn start_opens_duration_flow() {
        let mut h = Harness::new();
        h.say("hi");
        let actions = h.say("?start");
        assert!(matches!(actions[0].kind, ActionKind::Prompt { .. }));
        assert!(actions[0].text().contains("time limit"));
        assert_eq!(h.state.open_flow.as_ref().unwrap().step, FlowStep::StartDuration);

        let bad = h.say("soon");
        assert!(bad[0].text().contains("positive number"));
        let ok = h.say("15");
        assert!(ok[0].text().contains("15 min"));
        assert!(h.state.open_flow.is_none());
        let session = h.state.active().unwrap();
        assert_eq!(session.duration_ms, 900_000);
    }

    #[test]
    fn report_requires_session() {
        let mut h = Harness::new();
        h.say("hi");
        let actions = h.say("?report");
        assert_eq!(actions.len(), 1);
        assert!(actions[0].text().contains("no active test session"));
        assert!(h.state.open_flow.is_none());
    }

    #[test]
    fn full_report_flow() {
        let mut h = Harness::new();
        h.register("Reminders-C1");
        h.start("15");
        let a = h.say("?report");
        assert!(a[0].text().contains("\"Reminders-C1\""));
        let a = h.say("Unknown charter");
        assert!(a[0].text().contains("couldn't find"));
        assert_eq!(h.state.open_flow.as_ref().unwrap().step, FlowStep::ReportCharter);
        let a = h.say("Reminders-C1");
        assert!(a[0].text().contains("bug or an issue"));
        let a = h.say("feature");
        assert!(a[0].text().contains("\"bug\" or \"issue\""));
        h.say("BUG");
        assert_eq!(h.state.open_flow.as_ref().unwrap().step, FlowStep::ReportDescription);
        h.say("crash on empty reminder title");
        let a = h.attach("crash.png");
        assert!(a[0].text().contains("1 attachment"));
        let t = h.engine.handle_event(
            &h.state,
            &Event::Message(InboundMessage::text("c", "beth", "done", h.now)),
        );
        h.state = t.state.clone();
        assert!(t.actions[0].text().starts_with("Bug report c:r1"));
        let report = &h.state.reports[0];
        assert_eq!(report.description, "crash on empty reminder title");
        assert_eq!(report.report_type, ReportType::Bug);
        assert_eq!(report.attachments.len(), 1);
        assert_eq!(report.charter_id, h.state.charters[0].charter_id);
        assert_eq!(Some(&report.session_id), h.state.active_session.as_ref());
        assert!(!report.late);
        assert!(matches!(&t.facts[0], Fact::ReportFiled(r) if r == report));
    }

    #[test]
    fn report_without_attachments() {
        let mut h = Harness::new();
        h.register("C1");
        h.start("15");
        for line in ["?report", "C1", "issue", "confusing label"] {
            h.say(line);
        }
        let a = h.say("done");
        assert!(a[0].text().starts_with("Issue report"));
        assert!(h.state.reports[0].attachments.is_empty());
        assert_eq!(h.state.reports[0].report_type, ReportType::Issue);
    }

    #[test]
    fn cancel_discards_flow() {
        let mut h = Harness::new();
        h.register("C1");
        h.start("15");
        h.say("?report");
        h.say("C1");
        let a = h.say("Cancel");
        assert!(a[0].text().contains("Cancelled reporting"));
        assert!(h.state.open_flow.is_none());
        assert!(h.state.reports.is_empty());
    }

    #[test]
    fn flow_collision() {
        let mut h = Harness::new();
        h.say("?charter");
        let a = h.say("?help");
        assert!(a[0].text().contains("still registering a charter"));
        assert_eq!(h.state.open_flow.as_ref().unwrap().kind(), FlowKind::CharterFlow);
        // Commands that don't open flows still work.
        assert!(h.say("?commands")[0].text().contains("?report"));
        assert_eq!(h.state.open_flow.as_ref().unwrap().step, FlowStep::CharterName);
    }

    #[test]
    fn charter_rules() {
        let base = Harness::new().state;
        let draft = |name: &str| CharterDraft {
            name: name.into(),
            app_name: "Reminders".into(),
            goals: "find crashes".into(),
            attachments: vec![],
            created_at: Timestamp::ZERO,
        };
        let (state, id) = register_charter(&base, draft("Reminders-C1")).unwrap();
        assert_eq!(state.charters.len(), 1);
        assert_eq!(state.charter(&id).unwrap().name, "Reminders-C1");
        assert_eq!(
            register_charter(&state, draft("Reminders-C1")).unwrap_err(),
            CharterError::DuplicateName("Reminders-C1".into())
        );
        assert_eq!(
            register_charter(&state, draft("")).unwrap_err(),
            CharterError::EmptyField("name")
        );
        let (state, _) = register_charter(&state, draft("B")).unwrap();
        let names: Vec<_> = state.charters.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["Reminders-C1", "B"]);
    }

    #[test]
    fn duplicate_name_reprompts() {
        let mut h = Harness::new();
        h.register("C1");
        h.say("?charter");
        let a = h.say("C1");
        assert!(a[0].text().contains("already exists"));
        assert_eq!(h.state.open_flow.as_ref().unwrap().step, FlowStep::CharterName);
    }

    #[test]
    fn help_inline_and_two_step() {
        let mut h = Harness::new();
        h.say("hi");
        let a = h.say("?help bad-neighborhood-tour");
        assert!(a[0].text().contains("revisit buggy parts"));
        assert!(h.state.open_flow.is_none());

        let a = h.say("?help");
        assert!(a[0].text().contains("(ii) Exploratory testing tours"));
        let a = h.say("bound");
        assert!(a[0].text().contains("boundary-value-analysis"));
        let a = h.say("boundary-value-analysis");
        assert!(matches!(a[0].kind, ActionKind::Reply { .. }));
        assert!(a[0].text().starts_with("Boundary-value analysis"));
        assert!(h.state.open_flow.is_none());
    }

    #[test]
    fn stop_ends_session() {
        let mut h = Harness::new();
        h.start("15");
        h.now = Timestamp::from_secs(60);
        let a = h.say("?stop");
        assert!(a[0].text().contains("stopped after 1 min"));
        assert!(h.state.active().is_none());
        assert_eq!(h.state.sessions[0].end_reason, Some(EndReason::Stopped));
        assert!(h.advance(2000).is_empty());
        assert!(h.say("?stop")[0].text().contains("no active"));
    }

    #[test]
    fn late_report_is_flagged() {
        let mut h = Harness::new();
        h.register("C1");
        h.start("1");
        h.say("?report");
        h.say("C1");
        h.say("bug");
        h.advance(120);
        assert!(h.state.active().is_none());
        h.say("it crashed");
        h.say("done");
        assert!(h.state.reports[0].late);
    }

    #[test]
    fn suggestion_deferred_while_flow_open() {
        let mut h = Harness::new();
        h.register("C1");
        h.start("30");
        let due = h.state.active().unwrap().next_suggestion_at().unwrap();
        h.say("?report");
        h.now = due;
        let timer = h.engine.pop_due_timer(&mut h.state, h.now).unwrap();
        assert_eq!(timer.kind, TimerKind::SuggestionDue);
        let t = h.step(Event::Timer(timer));
        assert!(t.actions.is_empty());
        assert!(matches!(t.facts[0], Fact::SuggestionDeferred { .. }));

        h.say("C1");
        h.say("bug");
        h.say("wrong date");
        let a = h.say("done");
        let kinds: Vec<_> = a.iter().map(|a| a.kind_name()).collect();
        assert_eq!(kinds, ["reply", "suggestion"]);
    }

    #[test]
    fn deferred_suggestion_dropped_at_expiry() {
        let mut h = Harness::new();
        h.register("C1");
        h.start("5");
        h.say("?report");
        let actions = h.advance(400);
        assert!(actions.iter().all(|a| a.kind_name() == "reminder"));
        assert!(h.state.active().is_none());
        let a = h.say("C1");
        assert!(a.iter().all(|a| a.kind_name() != "suggestion"));
    }

    #[test]
    fn fifteen_minute_session_reminders() {
        let mut h = Harness::new();
        h.start("15");
        let mut seen = Vec::new();
        for _ in 0..1000 {
            let at = h.now.plus_secs(1);
            for a in h.advance(1) {
                if a.kind_name() == "reminder" {
                    seen.push(at.millis() / 1000);
                }
            }
        }
        assert_eq!(seen, vec![450, 720, 900]);
    }

    #[test]
    fn invalid_command_hint() {
        let mut h = Harness::new();
        h.say("hi");
        let a = h.say("?reprt");
        assert!(a[0].text().contains("Did you mean ?report?"));
    }

    #[test]
    fn empty_catalog_notice_once() {
        let config = EngineConfig {
            catalog: Arc::new(Catalog {
                version: "1".into(),
                items: vec![],
            }),
            policies: Policies {
                suggestions: crate::session::SuggestionPolicy::new(1, 0).unwrap(),
                ..Policies::default()
            },
            ..EngineConfig::default()
        };
        let engine = Engine::new(config);
        let mut h = Harness {
            state: engine.initial_state("c".into()),
            engine,
            now: Timestamp::ZERO,
        };
        h.start("10");
        let a = h.advance(600);
        let notices = a.iter().filter(|a| a.kind_name() == "notice").count();
        assert_eq!(notices, 1);
        assert!(a.iter().all(|a| a.kind_name() != "suggestion"));
    }
}
