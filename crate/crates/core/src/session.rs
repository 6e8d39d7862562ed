//! Time-boxed test sessions on the engine's virtual clock.
//!
//! A session owns its reminder schedule and the due time of the next active
//! suggestion. Timer events are pulled from a session with
//! [`Session::pop_due`]; each event is handed out exactly once.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{Catalog, KnowledgeItem};
use crate::types::{ChannelId, SessionId, Timestamp};

/// Longest session accepted, in minutes.
pub const MAX_SESSION_MINUTES: f64 = 24.0 * 60.0;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("reminder fractions must not be empty")]
    NoFractions,
    #[error("reminder fraction {0} is outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("reminder fractions must be strictly increasing")]
    NotIncreasing,
    #[error("the last reminder fraction must be 1.0 (the session-end notice)")]
    MissingEndNotice,
    #[error("suggestion min_gap must be positive")]
    ZeroGap,
}

/// When to remind the tester of the remaining time, as fractions of the
/// session duration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ReminderPolicy {
    fractions: Vec<f64>,
}

impl ReminderPolicy {
    pub fn new(fractions: Vec<f64>) -> Result<Self, PolicyError> {
        if fractions.is_empty() {
            return Err(PolicyError::NoFractions);
        }
        if let Some(bad) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(PolicyError::FractionOutOfRange(*bad));
        }
        if fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PolicyError::NotIncreasing);
        }
        if fractions.last() != Some(&1.0) {
            return Err(PolicyError::MissingEndNotice);
        }
        Ok(Self { fractions })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }
}

impl Default for ReminderPolicy {
    fn default() -> Self {
        Self {
            fractions: vec![0.5, 0.8, 1.0],
        }
    }
}

impl TryFrom<Vec<f64>> for ReminderPolicy {
    type Error = PolicyError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        ReminderPolicy::new(value)
    }
}

impl From<ReminderPolicy> for Vec<f64> {
    fn from(value: ReminderPolicy) -> Self {
        value.fractions
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionPolicy {
    pub min_gap_secs: u64,
    pub initial_delay_secs: u64,
}

impl SuggestionPolicy {
    pub fn new(min_gap_secs: u64, initial_delay_secs: u64) -> Result<Self, PolicyError> {
        if min_gap_secs == 0 {
            return Err(PolicyError::ZeroGap);
        }
        Ok(Self {
            min_gap_secs,
            initial_delay_secs,
        })
    }

    fn min_gap_ms(&self) -> u64 {
        self.min_gap_secs * 1000
    }
}

impl Default for SuggestionPolicy {
    fn default() -> Self {
        Self {
            min_gap_secs: 180,
            initial_delay_secs: 120,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Policies {
    pub reminders: ReminderPolicy,
    pub suggestions: SuggestionPolicy,
}

/// Seeded generator behind suggestion timing and item choice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchedulerRng(ChaCha8Rng);

impl SchedulerRng {
    pub fn seeded(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    fn uniform_inclusive(&mut self, upper: u64) -> u64 {
        self.0.random_range(0..=upper)
    }

    fn index(&mut self, len: usize) -> usize {
        self.0.random_range(0..len)
    }
}

/// Next suggestion time: `last_emit + min_gap + U[0, min_gap]`, in ms.
pub fn next_suggestion_time(rng: &mut SchedulerRng, policy: &SuggestionPolicy, last_emit: Timestamp) -> Timestamp {
    let gap = policy.min_gap_ms();
    last_emit.plus_millis(gap + rng.uniform_inclusive(gap))
}

fn first_suggestion_time(rng: &mut SchedulerRng, policy: &SuggestionPolicy, started_at: Timestamp) -> Timestamp {
    started_at
        .plus_secs(policy.initial_delay_secs)
        .plus_millis(rng.uniform_inclusive(policy.min_gap_ms()))
}

/// Uniform draw over the catalog; `None` when it is empty.
pub fn pick_suggestion<'c>(rng: &mut SchedulerRng, catalog: &'c Catalog) -> Option<&'c KnowledgeItem> {
    if catalog.is_empty() {
        return None;
    }
    let idx = rng.index(catalog.len());
    catalog.items.get(idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndReason {
    Expired,
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimerKind {
    ReminderDue { fraction: f64 },
    SuggestionDue,
    SessionExpired,
}

impl TimerKind {
    fn rank(&self) -> u8 {
        match self {
            TimerKind::ReminderDue { .. } => 0,
            TimerKind::SuggestionDue => 1,
            TimerKind::SessionExpired => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimerEvent {
    #[serde(flatten)]
    pub kind: TimerKind,
    pub session_id: SessionId,
    pub due_at: Timestamp,
}

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("the time limit must be a positive number of minutes (at most {MAX_SESSION_MINUTES})")]
    InvalidDuration,
    #[error("a session is already active")]
    AlreadyActive,
}

/// Parses the tester's answer to "what is the time limit?".
pub fn parse_duration_minutes(text: &str) -> Result<f64, SessionError> {
    let cleaned = text
        .trim()
        .trim_end_matches(|c: char| c.is_alphabetic() || c == '.' || c.is_whitespace())
        .trim();
    let cleaned = if cleaned.is_empty() { text.trim() } else { cleaned };
    match cleaned.replace(',', ".").parse::<f64>() {
        Ok(m) if m.is_finite() && m > 0.0 && m <= MAX_SESSION_MINUTES => Ok(m),
        _ => Err(SessionError::InvalidDuration),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub session_id: SessionId,
    pub channel_id: ChannelId,
    pub started_at: Timestamp,
    pub duration_ms: u64,
    pub reminder_policy: ReminderPolicy,
    pub ended_at: Option<Timestamp>,
    pub end_reason: Option<EndReason>,
    reminders_emitted: usize,
    expiry_emitted: bool,
    next_suggestion_at: Option<Timestamp>,
    suggestion_deferred: bool,
}

/// Starts a session unless one is already active on the channel.
pub fn start_session(
    active: Option<&Session>,
    session_id: SessionId,
    channel_id: ChannelId,
    duration_minutes: f64,
    now: Timestamp,
    policies: &Policies,
    rng: &mut SchedulerRng,
) -> Result<Session, SessionError> {
    if active.is_some_and(Session::is_active) {
        return Err(SessionError::AlreadyActive);
    }
    if !(duration_minutes.is_finite() && duration_minutes > 0.0 && duration_minutes <= MAX_SESSION_MINUTES) {
        return Err(SessionError::InvalidDuration);
    }
    let duration_ms = (duration_minutes * 60_000.0).round() as u64;
    if duration_ms == 0 {
        return Err(SessionError::InvalidDuration);
    }
    let mut session = Session {
        session_id,
        channel_id,
        started_at: now,
        duration_ms,
        reminder_policy: policies.reminders.clone(),
        ended_at: None,
        end_reason: None,
        reminders_emitted: 0,
        expiry_emitted: false,
        next_suggestion_at: None,
        suggestion_deferred: false,
    };
    let first = first_suggestion_time(rng, &policies.suggestions, now);
    session.schedule_suggestion(first);
    Ok(session)
}

impl Session {
    pub fn ends_at(&self) -> Timestamp {
        self.started_at.plus_millis(self.duration_ms)
    }

    pub fn is_active(&self) -> bool {
        self.ended_at.is_none()
    }

    pub fn remaining_ms(&self, now: Timestamp) -> u64 {
        if self.is_active() {
            self.ends_at().millis_since(now)
        } else {
            0
        }
    }

    /// Due times of every reminder in the policy.
    pub fn reminder_times(&self) -> Vec<(f64, Timestamp)> {
        self.reminder_policy
            .fractions()
            .iter()
            .map(|f| {
                (
                    *f,
                    self.started_at
                        .plus_millis((f * self.duration_ms as f64).round() as u64),
                )
            })
            .collect()
    }

    pub fn next_suggestion_at(&self) -> Option<Timestamp> {
        self.next_suggestion_at
    }

    pub fn suggestion_deferred(&self) -> bool {
        self.suggestion_deferred
    }

    /// Sets the next suggestion time, discarding it if it falls at or after
    /// the end of the session.
    pub fn schedule_suggestion(&mut self, at: Timestamp) {
        self.next_suggestion_at = (at < self.ends_at()).then_some(at);
    }

    pub fn defer_suggestion(&mut self) {
        self.suggestion_deferred = true;
    }

    /// Clears a deferred suggestion, returning whether one was pending.
    pub fn take_deferred(&mut self) -> bool {
        std::mem::take(&mut self.suggestion_deferred)
    }

    pub fn end(&mut self, at: Timestamp, reason: EndReason) {
        if self.ended_at.is_none() {
            self.ended_at = Some(at);
            self.end_reason = Some(reason);
            self.next_suggestion_at = None;
            self.suggestion_deferred = false;
        }
    }

    fn peek_due(&self, now: Timestamp) -> Option<TimerEvent> {
        if self.expiry_emitted || self.end_reason == Some(EndReason::Stopped) {
            return None;
        }
        let mut candidates = Vec::with_capacity(3);
        if let Some((fraction, due_at)) = self.reminder_times().get(self.reminders_emitted).copied() {
            candidates.push(TimerEvent {
                kind: TimerKind::ReminderDue { fraction },
                session_id: self.session_id.clone(),
                due_at,
            });
        }
        if let Some(due_at) = self.next_suggestion_at {
            candidates.push(TimerEvent {
                kind: TimerKind::SuggestionDue,
                session_id: self.session_id.clone(),
                due_at,
            });
        }
        candidates.push(TimerEvent {
            kind: TimerKind::SessionExpired,
            session_id: self.session_id.clone(),
            due_at: self.ends_at(),
        });
        candidates
            .into_iter()
            .filter(|e| e.due_at <= now)
            .min_by_key(|e| (e.due_at, e.kind.rank()))
    }

    /// Removes and returns the earliest timer event due at or before `now`.
    pub fn pop_due(&mut self, now: Timestamp) -> Option<TimerEvent> {
        let event = self.peek_due(now)?;
        match event.kind {
            TimerKind::ReminderDue { .. } => self.reminders_emitted += 1,
            TimerKind::SuggestionDue => self.next_suggestion_at = None,
            TimerKind::SessionExpired => self.expiry_emitted = true,
        }
        Some(event)
    }

    /// Every not-yet-emitted timer event due at or before `now`, in due order.
    pub fn due_events(&mut self, now: Timestamp) -> Vec<TimerEvent> {
        std::iter::from_fn(|| self.pop_due(now)).collect()
    }
}
