//! Interaction accounting over an audit log.
//!
//! Bot turns are *active* when the bot starts them (introduction, prompts,
//! reminders, suggestions, notices) and *reactive* when they answer a tester
//! (replies). Tester turns are *active* when they address the bot with a
//! command (accepted or invalid) and *reactive* when they answer a prompt.
//! Plain chatter outside a flow is left out of the table and counted
//! separately.

use std::fmt::Write as _;
use std::ops::Range;
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::dialog::{Fact, ReportType};
use crate::store::{Actor, Direction, EventRecord, PayloadKind, RecordData};
use crate::types::UserId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum InteractionClass {
    BotReactive,
    BotActive,
    TesterReactive,
    TesterActiveAccepted,
    TesterActiveInvalid,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("record {0} is not a chat record")]
    NotChat(u64),
    #[error("phase spans {0:?} and {1:?} overlap")]
    Overlap(Range<u64>, Range<u64>),
    #[error("invalid phase spec {0:?} (expected e.g. training=0..40,test=40..)")]
    BadPhaseSpec(String),
}

/// Classifies one chat record. Plain tester chatter yields `Ok(None)`.
pub fn classify(record: &EventRecord) -> Result<Option<InteractionClass>, AnalyticsError> {
    use InteractionClass::*;
    match (record.direction, &record.actor) {
        (Direction::Internal, _) => Err(AnalyticsError::NotChat(record.offset)),
        (Direction::Inbound, Actor::Tester(_)) => Ok(match record.payload_kind {
            PayloadKind::Command => Some(TesterActiveAccepted),
            PayloadKind::InvalidCommand => Some(TesterActiveInvalid),
            PayloadKind::FlowReply => Some(TesterReactive),
            _ => None,
        }),
        (Direction::Outbound, Actor::Bot) => Ok(match record.payload_kind {
            PayloadKind::Reply if record.correlation_id.is_some() => Some(BotReactive),
            PayloadKind::Reply
            | PayloadKind::Prompt
            | PayloadKind::Reminder
            | PayloadKind::Suggestion
            | PayloadKind::System => Some(BotActive),
            _ => None,
        }),
        _ => Err(AnalyticsError::NotChat(record.offset)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    TestSession,
}

impl FromStr for Phase {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "training" => Ok(Phase::Training),
            "test" | "test_session" | "test-session" | "session" => Ok(Phase::TestSession),
            _ => Err(AnalyticsError::BadPhaseSpec(s.to_owned())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseSpan {
    pub phase: Phase,
    pub offsets: Range<u64>,
}

impl PhaseSpan {
    pub fn new(phase: Phase, offsets: Range<u64>) -> Self {
        Self { phase, offsets }
    }

    /// Parses `training=0..40,test=40..` (an open end runs to the end of the log).
    pub fn parse_list(spec: &str) -> Result<Vec<PhaseSpan>, AnalyticsError> {
        let bad = || AnalyticsError::BadPhaseSpec(spec.to_owned());
        spec.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|part| {
                let (phase, range) = part.split_once('=').ok_or_else(bad)?;
                let (start, end) = range.split_once("..").ok_or_else(bad)?;
                let start: u64 = start.trim().parse().map_err(|_| bad())?;
                let end: u64 = match end.trim() {
                    "" => u64::MAX,
                    e => e.parse().map_err(|_| bad())?,
                };
                Ok(PhaseSpan::new(phase.parse()?, start..end))
            })
            .collect()
    }
}

/// Splits a log into contiguous runs of records inside and outside sessions.
pub fn derive_phases(log: &[EventRecord]) -> Vec<PhaseSpan> {
    let mut spans: Vec<PhaseSpan> = Vec::new();
    for record in log {
        let phase = if record.session_id.is_some() {
            Phase::TestSession
        } else {
            Phase::Training
        };
        match spans.last_mut() {
            Some(span) if span.phase == phase && span.offsets.end == record.offset => span.offsets.end += 1,
            _ => spans.push(PhaseSpan::new(phase, record.offset..record.offset + 1)),
        }
    }
    spans
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BotCounts {
    pub reactive: u64,
    pub active: u64,
}

impl BotCounts {
    pub fn total(&self) -> u64 {
        self.reactive + self.active
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TesterCounts {
    pub reactive: u64,
    pub active_accepted: u64,
    pub active_invalid: u64,
}

impl TesterCounts {
    pub fn total(&self) -> u64 {
        self.reactive + self.active_accepted + self.active_invalid
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PhaseCounts {
    pub bot: BotCounts,
    pub testers: TesterCounts,
    /// Plain tester messages left out of the table.
    pub excluded_plain: u64,
}

impl PhaseCounts {
    pub fn add(&mut self, class: InteractionClass) {
        use InteractionClass::*;
        match class {
            BotReactive => self.bot.reactive += 1,
            BotActive => self.bot.active += 1,
            TesterReactive => self.testers.reactive += 1,
            TesterActiveAccepted => self.testers.active_accepted += 1,
            TesterActiveInvalid => self.testers.active_invalid += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricsTable {
    pub training: PhaseCounts,
    pub test_sessions: PhaseCounts,
}

impl MetricsTable {
    pub fn phase(&self, phase: Phase) -> &PhaseCounts {
        match phase {
            Phase::Training => &self.training,
            Phase::TestSession => &self.test_sessions,
        }
    }

    pub fn phase_mut(&mut self, phase: Phase) -> &mut PhaseCounts {
        match phase {
            Phase::Training => &mut self.training,
            Phase::TestSession => &mut self.test_sessions,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let phase = |p: &PhaseCounts| {
            json!({
                "bot": { "reactive": p.bot.reactive, "active": p.bot.active, "total": p.bot.total() },
                "testers": {
                    "reactive": p.testers.reactive,
                    "active_accepted": p.testers.active_accepted,
                    "active_invalid": p.testers.active_invalid,
                    "total": p.testers.total(),
                },
                "excluded_plain": p.excluded_plain,
            })
        };
        json!({ "training": phase(&self.training), "test_sessions": phase(&self.test_sessions) })
    }

    pub fn render_text(&self) -> String {
        let (t, s) = (&self.training, &self.test_sessions);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "  {:<26}{:>10}{:>15}",
            "Number of interactions", "TRAINING", "TEST SESSIONS"
        );
        let _ = writeln!(out, "  Bot");
        let row = |out: &mut String, label: &str, a: u64, b: u64| {
            let _ = writeln!(out, "    {label:<24}{a:>10}{b:>15}");
        };
        row(&mut out, "Reactive int.", t.bot.reactive, s.bot.reactive);
        row(&mut out, "Active int.", t.bot.active, s.bot.active);
        row(&mut out, "Total", t.bot.total(), s.bot.total());
        let _ = writeln!(out, "  Testers");
        row(&mut out, "Reactive int.", t.testers.reactive, s.testers.reactive);
        row(
            &mut out,
            "Active int. (accepted)",
            t.testers.active_accepted,
            s.testers.active_accepted,
        );
        row(
            &mut out,
            "Active int. (invalid)",
            t.testers.active_invalid,
            s.testers.active_invalid,
        );
        row(&mut out, "Total", t.testers.total(), s.testers.total());
        let _ = write!(
            out,
            "  Excluded: {} plain tester message(s) outside dialog flows ({} training, {} test sessions).",
            t.excluded_plain + s.excluded_plain,
            t.excluded_plain,
            s.excluded_plain
        );
        out
    }
}

fn check_overlaps(spans: &[PhaseSpan]) -> Result<(), AnalyticsError> {
    let mut sorted: Vec<&PhaseSpan> = spans.iter().filter(|s| s.offsets.start < s.offsets.end).collect();
    sorted.sort_by_key(|s| s.offsets.start);
    for pair in sorted.windows(2) {
        if pair[1].offsets.start < pair[0].offsets.end {
            return Err(AnalyticsError::Overlap(
                pair[0].offsets.clone(),
                pair[1].offsets.clone(),
            ));
        }
    }
    Ok(())
}

/// Tabulates every chat record that falls inside one of the phase spans.
pub fn interaction_table(log: &[EventRecord], phases: &[PhaseSpan]) -> Result<MetricsTable, AnalyticsError> {
    check_overlaps(phases)?;
    let mut table = MetricsTable::default();
    for record in log.iter().filter(|r| r.is_chat()) {
        let Some(span) = phases.iter().find(|p| p.offsets.contains(&record.offset)) else {
            continue;
        };
        let cell = table.phase_mut(span.phase);
        match classify(record)? {
            Some(class) => cell.add(class),
            None => cell.excluded_plain += 1,
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BugStats {
    pub participants: Vec<UserId>,
    pub per_participant_counts: Vec<u64>,
    pub total: u64,
    /// Rounded to two decimals.
    pub mean: f64,
    pub median: f64,
}

impl BugStats {
    pub fn from_counts(counts: &[u64]) -> BugStats {
        let participants = (1..=counts.len()).map(|i| UserId(format!("p{i}"))).collect();
        Self::with_participants(participants, counts.to_vec())
    }

    fn with_participants(participants: Vec<UserId>, counts: Vec<u64>) -> BugStats {
        let total: u64 = counts.iter().sum();
        let n = counts.len();
        let mean = if n == 0 {
            0.0
        } else {
            (total as f64 / n as f64 * 100.0).round() / 100.0
        };
        let mut sorted = counts.clone();
        sorted.sort_unstable();
        let median = match n {
            0 => 0.0,
            n if n % 2 == 1 => sorted[n / 2] as f64,
            n => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
        };
        BugStats {
            participants,
            per_participant_counts: counts,
            total,
            mean,
            median,
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::from("Bugs per participant:\n");
        for (user, count) in self.participants.iter().zip(&self.per_participant_counts) {
            let _ = writeln!(out, "  {user:<20}{count:>5}");
        }
        let _ = write!(
            out,
            "  total {}  mean {:.2}  median {}",
            self.total, self.mean, self.median
        );
        out
    }
}

/// Bug-type reports per tester. Every tester who appears in the log counts as
/// a participant, in order of first appearance; issues are not counted.
pub fn bug_stats(log: &[EventRecord]) -> BugStats {
    let mut participants: Vec<UserId> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let slot = |participants: &mut Vec<UserId>, counts: &mut Vec<u64>, user: &UserId| match participants
        .iter()
        .position(|p| p == user)
    {
        Some(i) => i,
        None => {
            participants.push(user.clone());
            counts.push(0);
            participants.len() - 1
        }
    };
    for record in log {
        if let Some(user) = record.tester() {
            slot(&mut participants, &mut counts, user);
        }
        if let Some(RecordData::Fact(Fact::ReportFiled(report))) = &record.data {
            let i = slot(&mut participants, &mut counts, &report.reported_by);
            if report.report_type == ReportType::Bug {
                counts[i] += 1;
            }
        }
    }
    BugStats::with_participants(participants, counts)
}
