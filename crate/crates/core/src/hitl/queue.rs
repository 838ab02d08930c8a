//! Where decisions come from: a scripted human for offline runs, and a
//! blocking guidance queue shared with the service.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{DeadlinePolicy, GuidanceAction, GuidanceDecision, GuidanceRequest, HitlError, Phase};
use crate::agents::AgentKind;

pub trait HumanChannel: Send + Sync {
    /// Blocks until the request is resolved.
    fn decide(&self, request: &GuidanceRequest) -> Result<GuidanceDecision, HitlError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDecision {
    pub agent: AgentKind,
    pub step: u64,
    pub phase: Phase,
    pub action: GuidanceAction,
    #[serde(default)]
    pub human_seconds: f64,
    #[serde(default)]
    pub operator: Option<String>,
}

/// Batch replay file of human decisions keyed by (agent, step, phase).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedHumanFile {
    #[serde(default)]
    pub decisions: Vec<ScriptedDecision>,
    /// Fail instead of auto-resolving requests the file does not cover.
    #[serde(default)]
    pub strict: bool,
}

#[derive(Debug, Clone)]
pub struct ScriptedHuman {
    decisions: HashMap<(AgentKind, u64, Phase), ScriptedDecision>,
    strict: bool,
}

impl ScriptedHuman {
    pub fn new(file: ScriptedHumanFile) -> Self {
        Self {
            decisions: file.decisions.into_iter().map(|d| ((d.agent, d.step, d.phase), d)).collect(),
            strict: file.strict,
        }
    }
}

impl HumanChannel for ScriptedHuman {
    fn decide(&self, request: &GuidanceRequest) -> Result<GuidanceDecision, HitlError> {
        match self.decisions.get(&(request.agent, request.step, request.phase)) {
            Some(d) => {
                d.action.validate_for(request)?;
                Ok(GuidanceDecision {
                    request_id: request.id.clone(),
                    action: d.action.clone(),
                    operator: d.operator.clone().unwrap_or_else(|| "scripted".into()),
                    human_seconds: d.human_seconds,
                    automatic: false,
                })
            }
            None if self.strict => Err(HitlError::GuidanceTimeout(request.id.clone())),
            None => Ok(GuidanceDecision {
                request_id: request.id.clone(),
                action: request.auto_action(),
                operator: "auto".into(),
                human_seconds: 0.0,
                automatic: true,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acknowledgement {
    pub request_id: String,
    pub decision: GuidanceDecision,
}

struct Entry {
    request: GuidanceRequest,
    posted: Instant,
    seq: u64,
    resolution: Option<GuidanceDecision>,
}

#[derive(Default)]
struct QueueState {
    entries: BTreeMap<String, Entry>,
    next_seq: u64,
    closed: bool,
}

/// Pending guidance requests. Each request resolves exactly once; later
/// submissions get the original acknowledgement back.
#[derive(Default)]
pub struct GuidanceQueue {
    state: Mutex<QueueState>,
    changed: Condvar,
}

impl std::fmt::Debug for GuidanceQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GuidanceQueue").field("entries", &self.state.lock().entries.len()).finish()
    }
}

impl GuidanceQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn post(&self, request: GuidanceRequest) {
        let mut state = self.state.lock();
        let seq = state.next_seq;
        state.next_seq += 1;
        state.entries.entry(request.id.clone()).or_insert(Entry {
            request,
            posted: Instant::now(),
            seq,
            resolution: None,
        });
        self.changed.notify_all();
    }

    /// Unresolved requests in posting order.
    pub fn pending(&self) -> Vec<GuidanceRequest> {
        let state = self.state.lock();
        let mut open: Vec<&Entry> = state.entries.values().filter(|e| e.resolution.is_none()).collect();
        open.sort_by_key(|e| e.seq);
        open.into_iter().map(|e| e.request.clone()).collect()
    }

    pub fn request(&self, id: &str) -> Option<GuidanceRequest> {
        self.state.lock().entries.get(id).map(|e| e.request.clone())
    }

    pub fn resolve(&self, id: &str, action: GuidanceAction, operator: &str) -> Result<Acknowledgement, HitlError> {
        let mut state = self.state.lock();
        let entry = state.entries.get_mut(id).ok_or_else(|| HitlError::UnknownRequest(id.to_owned()))?;
        if let Some(done) = &entry.resolution {
            return Ok(Acknowledgement {
                request_id: id.to_owned(),
                decision: done.clone(),
            });
        }
        action.validate_for(&entry.request)?;
        let decision = GuidanceDecision {
            request_id: id.to_owned(),
            action,
            operator: operator.to_owned(),
            human_seconds: entry.posted.elapsed().as_secs_f64(),
            automatic: false,
        };
        entry.resolution = Some(decision.clone());
        self.changed.notify_all();
        Ok(Acknowledgement {
            request_id: id.to_owned(),
            decision,
        })
    }

    /// Wakes every waiter; unresolved waits fail from now on.
    pub fn close(&self) {
        self.state.lock().closed = true;
        self.changed.notify_all();
    }

    /// Suspends until `id` is resolved or its deadline passes.
    pub fn wait(&self, id: &str, deadline: DeadlinePolicy) -> Result<GuidanceDecision, HitlError> {
        let until = match deadline {
            DeadlinePolicy::Block => None,
            DeadlinePolicy::TimeoutToAuto { seconds } => Some(Instant::now() + Duration::from_secs_f64(seconds.max(0.0))),
        };
        let mut state = self.state.lock();
        loop {
            let entry = state.entries.get(id).ok_or_else(|| HitlError::UnknownRequest(id.to_owned()))?;
            if let Some(done) = &entry.resolution {
                return Ok(done.clone());
            }
            if state.closed {
                return Err(HitlError::GuidanceTimeout(id.to_owned()));
            }
            match until {
                None => self.changed.wait(&mut state),
                Some(t) => {
                    if Instant::now() >= t || self.changed.wait_until(&mut state, t).timed_out() {
                        let entry = state.entries.get_mut(id).expect("entry exists");
                        if entry.resolution.is_none() {
                            entry.resolution = Some(GuidanceDecision {
                                request_id: id.to_owned(),
                                action: entry.request.auto_action(),
                                operator: "timeout".into(),
                                human_seconds: 0.0,
                                automatic: true,
                            });
                            self.changed.notify_all();
                        }
                        return Ok(entry.resolution.clone().expect("just resolved"));
                    }
                }
            }
        }
    }
}

/// Channel backed by a shared queue that operators resolve over the API.
#[derive(Debug, Clone)]
pub struct QueueHuman {
    pub queue: Arc<GuidanceQueue>,
}

impl HumanChannel for QueueHuman {
    fn decide(&self, request: &GuidanceRequest) -> Result<GuidanceDecision, HitlError> {
        self.queue.post(request.clone());
        self.queue.wait(&request.id, request.deadline)
    }
}
