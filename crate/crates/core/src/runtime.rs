//! Hosts the engine over an event store.
//!
//! For each event the runtime logs the inbound record, the resulting facts
//! and every outbound action, and only then hands the actions to the caller's
//! sink. Timers due before an inbound message are fired first, so each
//! channel sees one totally ordered stream of messages and timer events.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::chat::{ActionKind, InboundMessage, OutboundAction};
use crate::dialog::{Engine, EngineState, Event, Fact, Transition};
use crate::session::{TimerEvent, TimerKind};
use crate::store::{
    Actor, Direction, EventRecord, EventStore, MemoryStore, PayloadKind, RecordBody, RecordData, Selector, StoreError,
};
use crate::types::{ChannelId, SessionId, Timestamp};

pub const HALT_NOTICE: &str = "I could not write to the audit log, so this channel is paused to avoid losing records. \
Please contact the session organizer.";

/// An action ready to send, with the offset of its audit record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub action: OutboundAction,
    /// `None` only for the halt notice, which could not be logged.
    pub offset: Option<u64>,
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("channel {0} is halted after an audit storage failure")]
    Halted(ChannelId),
    #[error("message at {at} is older than channel {channel}'s clock ({clock})")]
    OutOfOrder {
        channel: ChannelId,
        at: Timestamp,
        clock: Timestamp,
    },
    #[error("a message must carry text or at least one attachment")]
    EmptyMessage,
    #[error("delivery to channel {channel} failed: {reason}")]
    Delivery { channel: ChannelId, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("existing log diverges from this engine's replay at offset {0}")]
    Diverged(u64),
}

#[derive(Clone, Debug)]
struct ChannelSlot {
    state: EngineState,
    clock: Timestamp,
    halted: bool,
}

#[derive(Debug)]
pub struct Runtime<S> {
    engine: Engine,
    store: S,
    channels: BTreeMap<ChannelId, ChannelSlot>,
}

impl<S: EventStore> Runtime<S> {
    pub fn new(engine: Engine, store: S) -> Self {
        Self {
            engine,
            store,
            channels: BTreeMap::new(),
        }
    }

    /// Wraps a store that already holds a log, rebuilding every channel's
    /// state by replaying it. The replay must reproduce the log exactly,
    /// which fails if the engine configuration (e.g. the seed) changed.
    pub fn resume(engine: Engine, store: S) -> Result<Self, RuntimeError> {
        let log = store.query(&Selector::All)?;
        let replayed = replay_log(engine, &log)?;
        let produced = replayed.store.records();
        if let Some(at) = (0..log.len().max(produced.len())).find(|&i| log.get(i) != produced.get(i)) {
            return Err(RuntimeError::Diverged(at as u64));
        }
        Ok(Self {
            engine: replayed.engine,
            store,
            channels: replayed.channels,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn into_store(self) -> S {
        self.store
    }

    pub fn state(&self, channel: &ChannelId) -> Option<&EngineState> {
        self.channels.get(channel).map(|c| &c.state)
    }

    pub fn is_halted(&self, channel: &ChannelId) -> bool {
        self.channels.get(channel).is_some_and(|c| c.halted)
    }

    pub fn channel_ids(&self) -> impl Iterator<Item = &ChannelId> {
        self.channels.keys()
    }

    pub fn deliver(&mut self, msg: InboundMessage) -> Result<Vec<Delivery>, RuntimeError> {
        self.deliver_with(msg, |_| Ok(()))
    }

    /// Processes one inbound message and sends the resulting actions through
    /// `sink`. All records are appended before the first send.
    pub fn deliver_with<F>(&mut self, msg: InboundMessage, sink: F) -> Result<Vec<Delivery>, RuntimeError>
    where
        F: FnMut(&Delivery) -> Result<(), String>,
    {
        if !msg.is_valid() {
            return Err(RuntimeError::EmptyMessage);
        }
        let channel = msg.channel_id.clone();
        let slot = self.channels.entry(channel.clone()).or_insert_with(|| ChannelSlot {
            state: self.engine.initial_state(channel.clone()),
            clock: msg.timestamp,
            halted: false,
        });
        if slot.halted {
            return Err(RuntimeError::Halted(channel));
        }
        if msg.timestamp < slot.clock {
            return Err(RuntimeError::OutOfOrder {
                channel,
                at: msg.timestamp,
                clock: slot.clock,
            });
        }
        let at = msg.timestamp;
        let mut deliveries = Vec::new();
        let ok = self.fire_timers(&channel, at, &mut deliveries)
            && self.run_step(&channel, Event::Message(msg), &mut deliveries);
        if ok {
            if let Some(slot) = self.channels.get_mut(&channel) {
                slot.clock = at;
            }
        }
        send_all(&channel, &deliveries, sink)?;
        Ok(deliveries)
    }

    /// Moves every channel's clock to `now`, firing due timers.
    pub fn advance_to(&mut self, now: Timestamp) -> Result<Vec<Delivery>, RuntimeError> {
        self.advance_to_with(now, |_| Ok(()))
    }

    pub fn advance_to_with<F>(&mut self, now: Timestamp, mut sink: F) -> Result<Vec<Delivery>, RuntimeError>
    where
        F: FnMut(&Delivery) -> Result<(), String>,
    {
        let channels: Vec<ChannelId> = self.channels.keys().cloned().collect();
        let mut all = Vec::new();
        for channel in channels {
            let deliveries = self.advance_channel(&channel, now)?;
            send_all(&channel, &deliveries, &mut sink)?;
            all.extend(deliveries);
        }
        Ok(all)
    }

    pub fn advance_channel(&mut self, channel: &ChannelId, now: Timestamp) -> Result<Vec<Delivery>, RuntimeError> {
        let mut deliveries = Vec::new();
        match self.channels.get(channel) {
            None => return Ok(deliveries),
            Some(slot) if slot.halted => return Err(RuntimeError::Halted(channel.clone())),
            Some(slot) if now < slot.clock => return Ok(deliveries),
            Some(_) => {}
        }
        if self.fire_timers(channel, now, &mut deliveries) {
            if let Some(slot) = self.channels.get_mut(channel) {
                slot.clock = now;
            }
        }
        Ok(deliveries)
    }

    fn fire_timers(&mut self, channel: &ChannelId, now: Timestamp, deliveries: &mut Vec<Delivery>) -> bool {
        loop {
            let Some(slot) = self.channels.get_mut(channel) else {
                return true;
            };
            let mut probe = slot.state.clone();
            let Some(timer) = self.engine.pop_due_timer(&mut probe, now) else {
                return true;
            };
            slot.state = probe;
            if !self.run_step(channel, Event::Timer(timer), deliveries) {
                return false;
            }
        }
    }

    /// Runs one transition and logs it. Returns `false` if the channel was
    /// halted by a storage failure.
    fn run_step(&mut self, channel: &ChannelId, event: Event, deliveries: &mut Vec<Delivery>) -> bool {
        let slot = self.channels.get(channel).expect("channel exists");
        let before = slot.state.active_session.clone();
        let transition = self.engine.handle_event(&slot.state, &event);
        match log_transition(&mut self.store, channel, &event, before, &transition) {
            Ok(logged) => {
                deliveries.extend(logged);
                let slot = self.channels.get_mut(channel).expect("channel exists");
                slot.state = transition.state;
                true
            }
            Err(_) => {
                let slot = self.channels.get_mut(channel).expect("channel exists");
                slot.halted = true;
                deliveries.push(Delivery {
                    action: OutboundAction::notice(channel, HALT_NOTICE),
                    offset: None,
                });
                false
            }
        }
    }
}

fn send_all<F>(channel: &ChannelId, deliveries: &[Delivery], mut sink: F) -> Result<(), RuntimeError>
where
    F: FnMut(&Delivery) -> Result<(), String>,
{
    for delivery in deliveries {
        sink(delivery).map_err(|reason| RuntimeError::Delivery {
            channel: channel.clone(),
            reason,
        })?;
    }
    Ok(())
}

fn timer_text(timer: &TimerEvent) -> String {
    match timer.kind {
        TimerKind::ReminderDue { fraction } => format!("reminder_due {fraction}"),
        TimerKind::SuggestionDue => "suggestion_due".into(),
        TimerKind::SessionExpired => "session_expired".into(),
    }
}

fn fact_session(fact: &Fact) -> Option<&SessionId> {
    match fact {
        Fact::CharterRegistered(_) => None,
        Fact::ReportFiled(r) => Some(&r.session_id),
        Fact::SessionStarted { session_id, .. }
        | Fact::SessionEnded { session_id, .. }
        | Fact::SuggestionDeferred { session_id }
        | Fact::SuggestionDropped { session_id } => Some(session_id),
    }
}

fn fact_text(fact: &Fact) -> String {
    match fact {
        Fact::CharterRegistered(c) => format!("charter_registered {}", c.charter_id),
        Fact::ReportFiled(r) => format!("report_filed {} {}", r.report_id, r.report_type),
        Fact::SessionStarted { session_id, .. } => format!("session_started {session_id}"),
        Fact::SessionEnded { session_id, reason, .. } => {
            format!(
                "session_ended {session_id} {}",
                serde_json::to_value(reason).unwrap_or_default().as_str().unwrap_or("")
            )
        }
        Fact::SuggestionDeferred { session_id } => format!("suggestion_deferred {session_id}"),
        Fact::SuggestionDropped { session_id } => format!("suggestion_dropped {session_id}"),
    }
}

fn action_kind(action: &OutboundAction) -> PayloadKind {
    match action.kind {
        ActionKind::Reply { .. } => PayloadKind::Reply,
        ActionKind::Prompt { .. } => PayloadKind::Prompt,
        ActionKind::Reminder { .. } => PayloadKind::Reminder,
        ActionKind::Suggestion { .. } => PayloadKind::Suggestion,
        ActionKind::SystemNotice { .. } => PayloadKind::System,
    }
}

fn log_transition<S: EventStore>(
    store: &mut S,
    channel: &ChannelId,
    event: &Event,
    session_before: Option<SessionId>,
    transition: &Transition,
) -> Result<Vec<Delivery>, StoreError> {
    let session_after = transition.state.active_session.clone();
    let trigger_body = match event {
        Event::Message(msg) => RecordBody {
            timestamp: msg.timestamp,
            channel_id: channel.clone(),
            session_id: session_before.clone(),
            actor: Actor::Tester(msg.user_id.clone()),
            direction: Direction::Inbound,
            payload_kind: transition.inbound_kind.unwrap_or(PayloadKind::Plain),
            text: msg.text.clone(),
            attachments: msg.attachments.clone(),
            flow_id: transition.inbound_flow.clone(),
            correlation_id: None,
            data: None,
        },
        Event::Timer(timer) => RecordBody {
            timestamp: timer.due_at,
            channel_id: channel.clone(),
            session_id: Some(timer.session_id.clone()),
            actor: Actor::Bot,
            direction: Direction::Internal,
            payload_kind: PayloadKind::Timer,
            text: timer_text(timer),
            attachments: Vec::new(),
            flow_id: None,
            correlation_id: None,
            data: Some(RecordData::Timer(timer.clone())),
        },
    };
    let at = trigger_body.timestamp;
    let trigger = store.append(trigger_body)?;
    let output_session = match event {
        Event::Timer(timer) => Some(timer.session_id.clone()),
        Event::Message(_) => session_after.or(session_before),
    };

    for fact in &transition.facts {
        store.append(RecordBody {
            timestamp: at,
            channel_id: channel.clone(),
            session_id: fact_session(fact).cloned().or_else(|| output_session.clone()),
            actor: Actor::Bot,
            direction: Direction::Internal,
            payload_kind: PayloadKind::System,
            text: fact_text(fact),
            attachments: Vec::new(),
            flow_id: None,
            correlation_id: Some(trigger),
            data: Some(RecordData::Fact(fact.clone())),
        })?;
    }

    let mut deliveries = Vec::with_capacity(transition.actions.len());
    for action in &transition.actions {
        let kind = action_kind(action);
        let correlation_id = match kind {
            PayloadKind::Reply | PayloadKind::Prompt => Some(trigger),
            _ => None,
        };
        let attachments = match &action.kind {
            ActionKind::Reply { attachments, .. } => attachments.clone(),
            _ => Vec::new(),
        };
        let offset = store.append(RecordBody {
            timestamp: at,
            channel_id: channel.clone(),
            session_id: output_session.clone(),
            actor: Actor::Bot,
            direction: Direction::Outbound,
            payload_kind: kind,
            text: action.text().to_owned(),
            attachments,
            flow_id: action.flow_id().cloned(),
            correlation_id,
            data: None,
        })?;
        deliveries.push(Delivery {
            action: action.clone(),
            offset: Some(offset),
        });
    }
    Ok(deliveries)
}

/// Rebuilds a runtime by re-feeding a log's inbound messages and clock
/// movements to a fresh engine.
pub fn replay_log(engine: Engine, log: &[EventRecord]) -> Result<Runtime<MemoryStore>, RuntimeError> {
    let mut runtime = Runtime::new(engine, MemoryStore::new());
    for record in log {
        match record.direction {
            Direction::Inbound => {
                let Actor::Tester(user) = &record.actor else {
                    continue;
                };
                runtime.deliver(InboundMessage {
                    channel_id: record.channel_id.clone(),
                    user_id: user.clone(),
                    text: record.text.clone(),
                    attachments: record.attachments.clone(),
                    timestamp: record.timestamp,
                })?;
            }
            Direction::Internal if record.payload_kind == PayloadKind::Timer => {
                runtime.advance_channel(&record.channel_id, record.timestamp)?;
            }
            _ => {}
        }
    }
    Ok(runtime)
}
