//! File-backed session store: `<root>/sessions/<id>/events.jsonl` plus a
//! derived `snapshot.json`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::events::{parse_jsonl, to_jsonl, EventKind, SessionEvent};
use super::state::{payload, replay, to_payload, FeedbackPurged, FeedbackRecorded, SessionSnapshot};
use super::OrchestratorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersistOutcome {
    Written,
    Unchanged,
}

fn unavailable(path: &Path, e: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::StoreUnavailable(format!("{}: {e}", path.display()))
}

pub fn session_dir(root: &Path, id: &str) -> PathBuf {
    root.join("sessions").join(id)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), OrchestratorError> {
    let dir = path.parent().expect("store paths have a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| unavailable(dir, e))?;
    tmp.write_all(bytes).map_err(|e| unavailable(path, e))?;
    tmp.persist(path).map_err(|e| unavailable(path, e.error))?;
    Ok(())
}

/// Writes the log and its snapshot. Rewriting an identical log is a no-op.
pub fn persist_session(root: &Path, id: &str, events: &[SessionEvent]) -> Result<PersistOutcome, OrchestratorError> {
    let dir = session_dir(root, id);
    let log_path = dir.join("events.jsonl");
    let body = to_jsonl(events);
    if let Ok(existing) = fs::read_to_string(&log_path) {
        if existing == body {
            return Ok(PersistOutcome::Unchanged);
        }
    }
    let snapshot = replay(events)?;
    fs::create_dir_all(&dir).map_err(|e| unavailable(&dir, e))?;
    let snap = serde_json::to_vec_pretty(&snapshot).expect("snapshot serializes");
    write_atomic(&dir.join("snapshot.json"), &snap)?;
    write_atomic(&log_path, body.as_bytes())?;
    Ok(PersistOutcome::Written)
}

/// Loads and verifies a stored log, returning it with its replayed snapshot.
pub fn load_session(root: &Path, id: &str) -> Result<(Vec<SessionEvent>, SessionSnapshot), OrchestratorError> {
    let dir = session_dir(root, id);
    if !dir.is_dir() {
        return Err(OrchestratorError::UnknownSession(id.to_owned()));
    }
    let log_path = dir.join("events.jsonl");
    let text = fs::read_to_string(&log_path).map_err(|e| unavailable(&log_path, e))?;
    let events = parse_jsonl(&text).map_err(|seq| OrchestratorError::CorruptLog {
        seq,
        reason: "malformed event line".into(),
    })?;
    let snapshot = replay(&events)?;
    Ok((events, snapshot))
}

/// Ids of every stored session, sorted.
pub fn list_sessions(root: &Path) -> Result<Vec<String>, OrchestratorError> {
    let dir = root.join("sessions");
    let Ok(entries) = fs::read_dir(&dir) else { return Ok(vec![]) };
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| unavailable(&dir, e))?;
        if entry.path().join("events.jsonl").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Drops the named feedback items by rewinding the log to the start of the
/// iteration that first introduced one of them, then appending a
/// `feedback-purged` marker. Resuming the returned log re-runs from there.
pub fn purge_feedback(events: &[SessionEvent], ids: &[String]) -> Result<Vec<SessionEvent>, OrchestratorError> {
    replay(events)?;
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let mut found = BTreeSet::new();
    let mut first: Option<usize> = None;
    for (i, e) in events.iter().enumerate() {
        if e.kind != EventKind::FeedbackRecorded {
            continue;
        }
        let p: FeedbackRecorded = payload(e)?;
        if wanted.contains(p.item.id.as_str()) {
            found.insert(p.item.id.clone());
            first.get_or_insert(i);
        }
    }
    if let Some(missing) = wanted.iter().find(|id| !found.contains(**id)) {
        return Err(OrchestratorError::UnknownFeedback((*missing).to_owned()));
    }
    let first = first.expect("at least one id was found");
    let cut = events[..first]
        .iter()
        .rposition(|e| e.kind == EventKind::IterationStarted)
        .unwrap_or(first);
    let log = super::events::EventLog::from_events(events[..cut].to_vec());
    log.append(
        EventKind::FeedbackPurged,
        to_payload(&FeedbackPurged {
            ids: ids.to_vec(),
            rewound_to: cut as u64,
        }),
        serde_json::Value::Null,
    );
    Ok(log.snapshot())
}
