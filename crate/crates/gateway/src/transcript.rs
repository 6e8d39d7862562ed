//! Scripted conversations replayed against the engine on a virtual clock.
//!
//! A transcript is a line-oriented script:
//!
//! ```text
//! # comments and blank lines are ignored
//! channel lab-1                      # optional, before the first step
//! say beth: ?start                   # tester message at the current clock
//! attach beth: crash.png image 2048  # attachment-only message
//! clock +450                         # advance the clock (s, or 500ms / 7m)
//! expect prompt contains: time limit # next bot output must match
//! expect nothing                     # no bot output is pending
//! ```
//!
//! `expect` takes an optional kind (`reply`, `prompt`, `reminder`,
//! `suggestion`, `notice`) and one of `exact`, `contains` or `regex`. Each
//! expectation consumes the next pending bot output in order. Outputs left
//! over at the end are reported but do not fail the run.

use std::collections::VecDeque;
use std::fmt;

use etbot_core::dialog::EngineConfig;
use etbot_core::store::EventRecord;
use etbot_core::{
    Attachment, ChannelId, Engine, InboundMessage, MediaKind, MemoryStore, OutboundAction, Runtime, Timestamp,
};
use regex::Regex;
use thiserror::Error;

const DEFAULT_CHANNEL: &str = "transcript";
const KINDS: [&str; 5] = ["reply", "prompt", "reminder", "suggestion", "notice"];

#[derive(Clone, Debug)]
pub enum Matcher {
    Exact(String),
    Contains(String),
    Regex(Regex),
}

impl Matcher {
    pub fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Exact(s) => text == s,
            Matcher::Contains(s) => text.contains(s.as_str()),
            Matcher::Regex(re) => re.is_match(text),
        }
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Exact(s) => write!(f, "exact {s:?}"),
            Matcher::Contains(s) => write!(f, "contains {s:?}"),
            Matcher::Regex(re) => write!(f, "regex /{}/", re.as_str()),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Step {
    Say { user: String, text: String },
    Attach { user: String, attachment: Attachment },
    Clock { millis: u64 },
    Expect { kind: Option<String>, matcher: Matcher },
    ExpectNothing,
}

#[derive(Clone, Debug)]
pub struct ScriptLine {
    pub line: usize,
    pub source: String,
    pub step: Step,
}

#[derive(Clone, Debug)]
pub struct Transcript {
    pub channel: ChannelId,
    pub steps: Vec<ScriptLine>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

fn unescape(s: &str) -> String {
    s.replace("\\n", "\n")
}

fn parse_clock(arg: &str) -> Option<u64> {
    let arg = arg.strip_prefix('+')?;
    let (digits, scale) = if let Some(d) = arg.strip_suffix("ms") {
        (d, 1)
    } else if let Some(d) = arg.strip_suffix('m') {
        (d, 60_000)
    } else {
        (arg.strip_suffix('s').unwrap_or(arg), 1000)
    };
    digits.parse::<u64>().ok().map(|n| n * scale)
}

fn split_actor(rest: &str) -> Option<(String, &str)> {
    let (user, body) = rest.split_once(':')?;
    let user = user.trim();
    (!user.is_empty() && !user.contains(char::is_whitespace)).then(|| (user.to_owned(), body.trim()))
}

fn parse_expect(rest: &str) -> Result<Step, String> {
    if rest.trim() == "nothing" {
        return Ok(Step::ExpectNothing);
    }
    let (head, body) = rest.split_once(':').ok_or("expect needs `<mode>: <text>`")?;
    let mut words: Vec<&str> = head.split_whitespace().collect();
    let mode = words.pop().ok_or("missing match mode")?;
    let kind = match words.as_slice() {
        [] => None,
        [k] if KINDS.contains(k) => Some((*k).to_owned()),
        other => return Err(format!("unknown action kind {:?}", other.join(" "))),
    };
    let body = unescape(body.strip_prefix(' ').unwrap_or(body));
    let matcher = match mode {
        "exact" => Matcher::Exact(body),
        "contains" => Matcher::Contains(body),
        "regex" => Matcher::Regex(Regex::new(&body).map_err(|e| e.to_string())?),
        other => return Err(format!("unknown match mode {other:?}")),
    };
    Ok(Step::Expect { kind, matcher })
}

fn parse_attach(rest: &str) -> Result<Step, String> {
    let (user, body) = split_actor(rest).ok_or("attach needs `<user>: <file> <image|file> <bytes>`")?;
    let parts: Vec<&str> = body.split_whitespace().collect();
    let [name, media, size] = parts.as_slice() else {
        return Err("attach needs `<file> <image|file> <bytes>`".into());
    };
    let media = match *media {
        "image" => MediaKind::Image,
        "file" => MediaKind::File,
        other => return Err(format!("unknown media kind {other:?}")),
    };
    let size = size.parse().map_err(|_| format!("bad size {size:?}"))?;
    Ok(Step::Attach {
        user,
        attachment: Attachment::new(*name, media, format!("transcript/{name}"), size),
    })
}

impl Transcript {
    pub fn parse(source: &str) -> Result<Transcript, ScriptError> {
        let mut channel = None;
        let mut steps = Vec::new();
        for (idx, raw) in source.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: String| ScriptError { line, message };
            let (directive, rest) = trimmed.split_once(char::is_whitespace).unwrap_or((trimmed, ""));
            let step = match directive {
                "channel" => {
                    if !steps.is_empty() || channel.is_some() {
                        return Err(err("`channel` must come once, before any step".into()));
                    }
                    channel = Some(ChannelId::new(rest.trim()));
                    continue;
                }
                "say" => {
                    let (user, text) = split_actor(rest).ok_or_else(|| err("say needs `<user>: <text>`".into()))?;
                    Step::Say {
                        user,
                        text: unescape(text),
                    }
                }
                "attach" => parse_attach(rest).map_err(err)?,
                "clock" => Step::Clock {
                    millis: parse_clock(rest.trim()).ok_or_else(|| err(format!("bad clock step {rest:?}")))?,
                },
                "expect" => parse_expect(rest).map_err(err)?,
                other => return Err(err(format!("unknown directive {other:?}"))),
            };
            steps.push(ScriptLine {
                line,
                source: trimmed.to_owned(),
                step,
            });
        }
        Ok(Transcript {
            channel: channel.unwrap_or_else(|| ChannelId::new(DEFAULT_CHANNEL)),
            steps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub line: usize,
    pub expected: String,
    pub actual: Option<String>,
    /// Preceding script lines, oldest first.
    pub context: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TranscriptReport {
    pub steps_run: usize,
    pub tester_messages: usize,
    pub expectations_met: usize,
    /// Bot outputs consumed by `expect` lines.
    pub outputs_matched: usize,
    pub bot_outputs: usize,
    pub unmatched: Vec<String>,
    pub failure: Option<Mismatch>,
}

impl TranscriptReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl fmt::Display for TranscriptReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => writeln!(
                f,
                "ok: {} steps, {} expectations met, {} bot outputs",
                self.steps_run, self.expectations_met, self.bot_outputs
            )?,
            Some(m) => {
                writeln!(f, "FAILED at line {}", m.line)?;
                writeln!(f, "  expected: {}", m.expected)?;
                match &m.actual {
                    Some(a) => writeln!(f, "  actual:   {a}")?,
                    None => writeln!(f, "  actual:   (no pending output)")?,
                }
                if !m.context.is_empty() {
                    writeln!(f, "  after:")?;
                    for line in &m.context {
                        writeln!(f, "    {line}")?;
                    }
                }
            }
        }
        for u in &self.unmatched {
            writeln!(f, "  unmatched: {u}")?;
        }
        Ok(())
    }
}

pub struct TranscriptOutcome {
    pub report: TranscriptReport,
    pub log: Vec<EventRecord>,
}

fn describe(action: &OutboundAction) -> String {
    format!("[{}] {:?}", action.kind_name(), action.text())
}

/// Replays `transcript` on a fresh engine seeded with `seed`.
pub fn run_transcript(transcript: &Transcript, mut config: EngineConfig, seed: u64) -> TranscriptOutcome {
    config.seed = seed;
    let mut runtime = Runtime::new(Engine::new(config), MemoryStore::new());
    let mut report = TranscriptReport::default();
    let mut pending: VecDeque<OutboundAction> = VecDeque::new();
    let mut clock = Timestamp::ZERO;
    let channel = &transcript.channel;

    for (idx, line) in transcript.steps.iter().enumerate() {
        report.steps_run += 1;
        let fail = |expected: String, actual: Option<String>| Mismatch {
            line: line.line,
            expected,
            actual,
            context: transcript.steps[idx.saturating_sub(3)..idx]
                .iter()
                .map(|l| format!("{:>4}: {}", l.line, l.source))
                .collect(),
        };
        if matches!(line.step, Step::Say { .. } | Step::Attach { .. }) {
            report.tester_messages += 1;
        }
        let produced = match &line.step {
            Step::Say { user, text } => runtime.deliver(InboundMessage::text(
                channel.clone(),
                user.as_str(),
                text.as_str(),
                clock,
            )),
            Step::Attach { user, attachment } => runtime.deliver(
                InboundMessage::text(channel.clone(), user.as_str(), "", clock).with_attachment(attachment.clone()),
            ),
            Step::Clock { millis } => {
                clock = clock.plus_millis(*millis);
                runtime.advance_to(clock)
            }
            Step::Expect { kind, matcher } => {
                let expected = match kind {
                    Some(k) => format!("[{k}] {matcher}"),
                    None => matcher.to_string(),
                };
                match pending.pop_front() {
                    Some(action)
                        if kind.as_deref().is_none_or(|k| k == action.kind_name())
                            && matcher.matches(action.text()) =>
                    {
                        report.expectations_met += 1;
                        report.outputs_matched += 1;
                    }
                    other => {
                        report.failure = Some(fail(expected, other.as_ref().map(describe)));
                        break;
                    }
                }
                continue;
            }
            Step::ExpectNothing => {
                if let Some(action) = pending.front() {
                    report.failure = Some(fail("nothing".into(), Some(describe(action))));
                    break;
                }
                report.expectations_met += 1;
                continue;
            }
        };
        match produced {
            Ok(deliveries) => {
                report.bot_outputs += deliveries.len();
                pending.extend(deliveries.into_iter().map(|d| d.action));
            }
            Err(e) => {
                report.failure = Some(fail("the step to be accepted".into(), Some(format!("error: {e}"))));
                break;
            }
        }
    }
    report.unmatched = pending.iter().map(describe).collect();
    TranscriptOutcome {
        report,
        log: runtime.into_store().into_records(),
    }
}
