//! Append-only, hash-chained session event log.

use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub const EVENT_SCHEMA_VERSION: u32 = 1;
pub const GENESIS_HASH: &str = "genesis";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    SessionStarted,
    ToolSeeded,
    IterationStarted,
    InterventionPlanned,
    PromptBuilt,
    CandidatesGenerated,
    GuidanceRequested,
    GuidanceResolved,
    FeedbackRecorded,
    FeedbackPurged,
    AutofixAttempt,
    CodeValidated,
    Verdict,
    ToolArchived,
    StateStepped,
    ScoreComputed,
    ModeSwitched,
    IterationFailed,
    IterationFinished,
    SessionEnded,
}

impl EventKind {
    pub fn as_str(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    #[serde(default = "schema_version")]
    pub v: u32,
    pub seq: u64,
    /// Wall clock, unix milliseconds. Not hashed.
    pub timestamp: u64,
    pub kind: EventKind,
    pub payload: Value,
    /// Latencies and other wall-clock measurements. Not hashed.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub timing: Value,
    pub prev_hash: String,
    pub hash: String,
}

fn schema_version() -> u32 {
    EVENT_SCHEMA_VERSION
}

/// Hash over everything except `timestamp` and `timing`.
pub fn event_hash(v: u32, seq: u64, kind: EventKind, payload: &Value, prev_hash: &str) -> String {
    let preimage = json!({ "v": v, "seq": seq, "kind": kind, "payload": payload, "prev_hash": prev_hash });
    let bytes = serde_json::to_vec(&preimage).expect("event preimage serializes");
    hex::encode(Sha256::digest(&bytes))
}

impl SessionEvent {
    pub fn recompute_hash(&self) -> String {
        event_hash(self.v, self.seq, self.kind, &self.payload, &self.prev_hash)
    }

    /// The event without its wall-clock fields, for byte comparisons.
    pub fn without_clock(&self) -> SessionEvent {
        SessionEvent {
            timestamp: 0,
            timing: Value::Null,
            ..self.clone()
        }
    }
}

/// Returns the sequence number of the first event breaking the chain.
pub fn verify_chain(events: &[SessionEvent]) -> Result<(), u64> {
    let mut prev = GENESIS_HASH.to_owned();
    for (i, e) in events.iter().enumerate() {
        if e.seq != i as u64 || e.prev_hash != prev || e.recompute_hash() != e.hash {
            return Err(i as u64);
        }
        prev = e.hash.clone();
    }
    Ok(())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Default)]
struct Shared {
    events: Mutex<Vec<SessionEvent>>,
    appended: Condvar,
}

/// Single-writer log that readers on other threads can follow.
#[derive(Clone, Default)]
pub struct EventLog {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("len", &self.len()).finish()
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_events(events: Vec<SessionEvent>) -> Self {
        let log = Self::default();
        *log.shared.events.lock() = events;
        log
    }

    pub fn append(&self, kind: EventKind, payload: Value, timing: Value) -> SessionEvent {
        let mut events = self.shared.events.lock();
        let seq = events.len() as u64;
        let prev_hash = events.last().map_or(GENESIS_HASH.to_owned(), |e| e.hash.clone());
        let hash = event_hash(EVENT_SCHEMA_VERSION, seq, kind, &payload, &prev_hash);
        let event = SessionEvent {
            v: EVENT_SCHEMA_VERSION,
            seq,
            timestamp: now_ms(),
            kind,
            payload,
            timing,
            prev_hash,
            hash,
        };
        events.push(event.clone());
        self.shared.appended.notify_all();
        event
    }

    pub fn len(&self) -> usize {
        self.shared.events.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<SessionEvent> {
        self.shared.events.lock().clone()
    }

    pub fn since(&self, from: u64) -> Vec<SessionEvent> {
        let events = self.shared.events.lock();
        events.iter().skip(from as usize).cloned().collect()
    }

    /// Long-poll: waits up to `timeout` for events at or after `from`.
    pub fn wait_since(&self, from: u64, timeout: Duration) -> Vec<SessionEvent> {
        let deadline = Instant::now() + timeout;
        let mut events = self.shared.events.lock();
        while events.len() as u64 <= from {
            if self.shared.appended.wait_until(&mut events, deadline).timed_out() {
                break;
            }
        }
        events.iter().skip(from as usize).cloned().collect()
    }

    /// Wakes long-poll readers without appending (used on shutdown).
    pub fn notify(&self) {
        self.shared.appended.notify_all();
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.snapshot())
    }
}

pub fn to_jsonl(events: &[SessionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

/// Parses JSONL; returns the 0-based line of the first malformed event.
pub fn parse_jsonl(text: &str) -> Result<Vec<SessionEvent>, u64> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|_| i as u64))
        .collect()
}
