//! Contract between the engine host and a chat platform.
//!
//! An adapter yields inbound messages in arrival order and sends outbound
//! actions. [`pump`] drains an adapter through a [`Runtime`], which keeps
//! each channel's messages in FIFO order and logs everything before sending.

use std::collections::VecDeque;

use etbot_core::{EventStore, InboundMessage, OutboundAction, Runtime, RuntimeError};

pub trait ChatAdapter {
    /// The next inbound message, or `None` when nothing is waiting.
    fn poll(&mut self) -> Option<InboundMessage>;

    fn send(&mut self, action: &OutboundAction) -> Result<(), String>;
}

/// In-memory adapter for tests and offline runs.
#[derive(Debug, Default)]
pub struct StubAdapter {
    inbound: VecDeque<InboundMessage>,
    pub sent: Vec<OutboundAction>,
    pub fail_sends: bool,
}

impl StubAdapter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, msg: InboundMessage) {
        self.inbound.push_back(msg);
    }
}

impl ChatAdapter for StubAdapter {
    fn poll(&mut self) -> Option<InboundMessage> {
        self.inbound.pop_front()
    }

    fn send(&mut self, action: &OutboundAction) -> Result<(), String> {
        if self.fail_sends {
            return Err("stub adapter refuses to send".into());
        }
        self.sent.push(action.clone());
        Ok(())
    }
}

/// Feeds every waiting message to `runtime`, returning how many were handled.
/// Stops at the first runtime error.
pub fn pump<A: ChatAdapter, S: EventStore>(adapter: &mut A, runtime: &mut Runtime<S>) -> Result<usize, RuntimeError> {
    let mut handled = 0;
    while let Some(msg) = adapter.poll() {
        runtime.deliver_with(msg, |d| adapter.send(&d.action))?;
        handled += 1;
    }
    Ok(handled)
}
