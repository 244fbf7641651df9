use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::TranscriptEvent;

#[derive(Default)]
struct HubState {
    events: Vec<TranscriptEvent>,
    subscribers: Vec<Sender<TranscriptEvent>>,
    closed: bool,
}

/// Single-producer, multi-consumer fan-out of transcript events.
///
/// A subscriber first receives every event published so far, then each new
/// event exactly once; its stream ends when the hub is closed.
#[derive(Clone, Default)]
pub struct EventHub {
    state: Arc<Mutex<HubState>>,
}

impl EventHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&self) -> Subscription {
        let (tx, rx) = mpsc::channel();
        let mut st = self.state.lock().expect("hub lock");
        for e in &st.events {
            // receiver is alive: we hold it
            let _ = tx.send(e.clone());
        }
        if !st.closed {
            st.subscribers.push(tx);
        }
        Subscription { rx }
    }

    pub(crate) fn publish(&self, event: &TranscriptEvent) {
        let mut st = self.state.lock().expect("hub lock");
        st.events.push(event.clone());
        st.subscribers.retain(|tx| tx.send(event.clone()).is_ok());
    }

    pub(crate) fn close(&self) {
        let mut st = self.state.lock().expect("hub lock");
        st.closed = true;
        st.subscribers.clear();
    }

    pub fn snapshot(&self) -> Vec<TranscriptEvent> {
        self.state.lock().expect("hub lock").events.clone()
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().expect("hub lock").closed
    }
}

pub struct Subscription {
    rx: Receiver<TranscriptEvent>,
}

impl Subscription {
    /// Waits up to `timeout`; `Disconnected` means the stream has ended.
    pub fn next_timeout(&self, timeout: Duration) -> Result<TranscriptEvent, RecvTimeoutError> {
        self.rx.recv_timeout(timeout)
    }
}

impl Iterator for Subscription {
    type Item = TranscriptEvent;

    fn next(&mut self) -> Option<TranscriptEvent> {
        self.rx.recv().ok()
    }
}
