//! Session state as a fold over events. The live session applies every event
//! it emits through the same reducer that replay uses.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::SessionConfig;
use super::events::{verify_chain, EventKind, SessionEvent};
use super::OrchestratorError;
use crate::agents::{AgentKind, Candidate, FeedbackItem, PromptBundle, Verdict};
use crate::embedding::Embedder;
use crate::env::{DocumentState, StepResult};
use crate::hitl::{
    GuidanceDecision, GuidanceRequest, InterventionCandidate, InterventionHistory, InterventionPlan, Phase,
    ReliabilityTracker,
};
use crate::library::{ToolLibrary, ToolRecord, ToolStatus};
use crate::sandbox::ExecutionReport;
use crate::scoring::ScoreBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRef {
    pub id: String,
    pub title: String,
    /// False for problems without a hidden reference (human-evaluated only).
    pub measurable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStarted {
    pub session_id: String,
    pub config: SessionConfig,
    pub problems: Vec<ProblemRef>,
    pub states: Vec<DocumentState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolEvent {
    pub iteration: Option<u64>,
    pub record: ToolRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStarted {
    pub iteration: u64,
    pub automatic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlanned {
    pub iteration: u64,
    pub budget_s: f64,
    pub candidates: Vec<InterventionCandidate>,
    pub plan: InterventionPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBuilt {
    pub iteration: u64,
    pub agent: AgentKind,
    pub purpose: String,
    pub prompt: PromptBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatesGenerated {
    pub iteration: u64,
    pub agent: AgentKind,
    pub step: u64,
    pub purpose: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRequested {
    pub iteration: u64,
    pub request: GuidanceRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceResolved {
    pub iteration: u64,
    pub agent: AgentKind,
    pub step: u64,
    pub phase: Phase,
    pub decision: GuidanceDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecorded {
    pub agent: AgentKind,
    pub item: FeedbackItem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPurged {
    pub ids: Vec<String>,
    /// Sequence number the log was rewound to.
    pub rewound_to: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutofixAttempt {
    pub iteration: u64,
    pub attempt: u32,
    pub fix: usize,
    pub report: ExecutionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateValidation {
    pub index: usize,
    pub parsed: bool,
    pub passed: bool,
    pub delta: Option<f64>,
    pub rank_score: f64,
    pub report: ExecutionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeValidated {
    pub iteration: u64,
    pub attempt: u32,
    pub candidates: Vec<CandidateValidation>,
    pub chosen: usize,
    pub human_chosen: bool,
    /// Validation of the chosen code after any autofix rounds.
    pub final_report: ExecutionReport,
    pub final_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictEvent {
    pub iteration: u64,
    pub attempt: u32,
    pub verdict: Verdict,
    pub raw: String,
    pub retries_remaining: u32,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateStepped {
    pub iteration: u64,
    pub problem: usize,
    pub state: DocumentState,
    pub step: StepResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreComputed {
    pub iteration: u64,
    pub problem: usize,
    pub problem_id: String,
    pub breakdown: Option<ScoreBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSwitched {
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationOutcome {
    Accepted,
    TooHard,
    Restarted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationFinished {
    pub iteration: u64,
    pub outcome: IterationOutcome,
    pub tool_id: Option<String>,
    pub retries: u32,
    /// Agent outcomes feeding the reliability estimates.
    pub reliability: Vec<(AgentKind, bool)>,
    /// Guidance points where a human actually decided.
    pub interventions: Vec<(AgentKind, Phase)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationFailed {
    pub iteration: u64,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEnded {
    pub reason: String,
}

/// Aggregates reported at the end of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub iterations: u64,
    pub failed_iterations: u64,
    pub restarted_iterations: u64,
    pub best_scores: BTreeMap<String, Option<f64>>,
    pub mean_best_score: f64,
    pub top_score: f64,
    pub tools_archived: u64,
    pub validated_tools: u64,
    pub too_hard_tools: u64,
    pub generated_codes: u64,
    pub human_seconds: f64,
    pub verdicts: BTreeMap<String, u64>,
    pub autofix_attempts: u64,
    pub events: u64,
    pub ended: bool,
}

/// Everything replay reconstructs, for field-by-field comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub summary: SessionSummary,
    pub states: Vec<DocumentState>,
    pub pools: BTreeMap<AgentKind, Vec<FeedbackItem>>,
    pub tools: Vec<ToolRecord>,
}

#[derive(Debug, Default, Clone, PartialEq)]
struct Counters {
    iterations: u64,
    failed: u64,
    restarted: u64,
    archived: u64,
    validated: u64,
    too_hard: u64,
    generated_codes: u64,
    human_seconds: f64,
    verdicts: BTreeMap<String, u64>,
    autofix: u64,
    events: u64,
    ended: bool,
}

pub struct SessionState {
    pub session_id: String,
    pub config: SessionConfig,
    pub problems: Vec<ProblemRef>,
    pub states: Vec<DocumentState>,
    pub recent: Vec<Vec<StepResult>>,
    pub best: Vec<Option<f64>>,
    pub library: ToolLibrary,
    pub pools: BTreeMap<AgentKind, Vec<FeedbackItem>>,
    pub next_step: BTreeMap<AgentKind, u64>,
    pub reliability: BTreeMap<AgentKind, ReliabilityTracker>,
    pub history: Vec<InterventionHistory>,
    /// Mean best score after each finished iteration.
    pub best_history: Vec<f64>,
    pub consecutive_retries: u32,
    pub switched_to_auto: bool,
    /// Index of the next iteration to run.
    pub iteration: u64,
    /// An iteration-started without its closing event.
    pub open_iteration: bool,
    started: bool,
    iteration_start_best: f64,
    counters: Counters,
}

impl std::fmt::Debug for SessionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionState")
            .field("session_id", &self.session_id)
            .field("iteration", &self.iteration)
            .field("events", &self.counters.events)
            .finish()
    }
}

fn decode<T: DeserializeOwned>(event: &SessionEvent) -> Result<T, OrchestratorError> {
    serde_json::from_value(event.payload.clone()).map_err(|e| OrchestratorError::CorruptLog {
        seq: event.seq,
        reason: format!("{} payload: {e}", event.kind.as_str()),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl SessionState {
    pub fn new(embedder: Embedder) -> Self {
        Self {
            session_id: String::new(),
            config: SessionConfig::default(),
            problems: Vec::new(),
            states: Vec::new(),
            recent: Vec::new(),
            best: Vec::new(),
            library: ToolLibrary::in_memory(embedder),
            pools: AgentKind::ALL.into_iter().map(|k| (k, Vec::new())).collect(),
            next_step: AgentKind::ALL.into_iter().map(|k| (k, 0)).collect(),
            reliability: AgentKind::ALL.into_iter().map(|k| (k, ReliabilityTracker::default())).collect(),
            history: Vec::new(),
            best_history: Vec::new(),
            consecutive_retries: 0,
            switched_to_auto: false,
            iteration: 0,
            open_iteration: false,
            started: false,
            iteration_start_best: 0.0,
            counters: Counters::default(),
        }
    }

    pub fn is_started(&self) -> bool {
        self.started
    }

    pub fn is_ended(&self) -> bool {
        self.counters.ended
    }

    pub fn human_seconds(&self) -> f64 {
        self.counters.human_seconds
    }

    pub fn event_count(&self) -> u64 {
        self.counters.events
    }

    pub fn mean_best(&self) -> f64 {
        mean(self.best.iter().flatten().copied())
    }

    fn bump_step(&mut self, agent: AgentKind, step: u64) {
        let next = self.next_step.entry(agent).or_insert(0);
        *next = (*next).max(step + 1);
    }

    fn close_iteration(&mut self, interventions: Vec<(AgentKind, Phase)>) {
        let now = self.mean_best();
        self.history.push(InterventionHistory {
            delta: now - self.iteration_start_best,
            interventions,
        });
        self.best_history.push(now);
        self.iteration += 1;
        self.open_iteration = false;
    }

    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), OrchestratorError> {
        if event.seq != self.counters.events {
            return Err(OrchestratorError::CorruptLog {
                seq: event.seq,
                reason: format!("expected sequence {}", self.counters.events),
            });
        }
        if !self.started && event.kind != EventKind::SessionStarted {
            return Err(OrchestratorError::CorruptLog {
                seq: event.seq,
                reason: "log does not begin with session-started".into(),
            });
        }
        match event.kind {
            EventKind::SessionStarted => {
                let p: SessionStarted = decode(event)?;
                if self.started {
                    return Err(OrchestratorError::CorruptLog {
                        seq: event.seq,
                        reason: "second session-started".into(),
                    });
                }
                self.session_id = p.session_id;
                self.config = p.config;
                self.recent = vec![Vec::new(); p.states.len()];
                self.best = p.states.iter().map(|s| s.last_breakdown.map(|b| b.total)).collect();
                self.states = p.states;
                self.problems = p.problems;
                self.started = true;
            }
            EventKind::ToolSeeded => {
                let p: ToolEvent = decode(event)?;
                self.library.archive_prepared(p.record)?;
            }
            EventKind::IterationStarted => {
                let p: IterationStarted = decode(event)?;
                self.iteration = p.iteration;
                self.open_iteration = true;
                self.iteration_start_best = self.mean_best();
                self.counters.iterations += 1;
            }
            EventKind::PromptBuilt | EventKind::InterventionPlanned | EventKind::Verdict => {
                if event.kind == EventKind::Verdict {
                    let p: VerdictEvent = decode(event)?;
                    *self.counters.verdicts.entry(p.verdict.label().to_owned()).or_insert(0) += 1;
                }
            }
            EventKind::CandidatesGenerated => {
                let p: CandidatesGenerated = decode(event)?;
                self.bump_step(p.agent, p.step);
                if p.agent == AgentKind::Coder {
                    self.counters.generated_codes += p.candidates.len() as u64;
                }
            }
            EventKind::GuidanceRequested => {
                let p: GuidanceRequested = decode(event)?;
                self.bump_step(p.request.agent, p.request.step);
            }
            EventKind::GuidanceResolved => {
                let p: GuidanceResolved = decode(event)?;
                self.counters.human_seconds += p.decision.human_seconds;
            }
            EventKind::FeedbackRecorded => {
                let p: FeedbackRecorded = decode(event)?;
                self.pools.entry(p.agent).or_default().push(p.item);
            }
            EventKind::FeedbackPurged => {
                let p: FeedbackPurged = decode(event)?;
                for pool in self.pools.values_mut() {
                    pool.retain(|f| !p.ids.contains(&f.id));
                }
            }
            EventKind::AutofixAttempt => self.counters.autofix += 1,
            EventKind::CodeValidated => {}
            EventKind::ToolArchived => {
                let p: ToolEvent = decode(event)?;
                match p.record.status {
                    ToolStatus::Validated => self.counters.validated += 1,
                    ToolStatus::TooHard => self.counters.too_hard += 1,
                    ToolStatus::Deprecated => {}
                }
                self.counters.archived += 1;
                self.library.archive_prepared(p.record)?;
            }
            EventKind::StateStepped => {
                let p: StateStepped = decode(event)?;
                let slot = self.states.get_mut(p.problem).ok_or_else(|| OrchestratorError::CorruptLog {
                    seq: event.seq,
                    reason: format!("unknown problem index {}", p.problem),
                })?;
                *slot = p.state;
                self.library.update_metrics(&p.step.tool_id, &p.step, p.iteration)?;
                self.recent[p.problem].push(p.step);
            }
            EventKind::ScoreComputed => {
                let p: ScoreComputed = decode(event)?;
                if let (Some(b), Some(best)) = (p.breakdown, self.best.get_mut(p.problem)) {
                    *best = Some(best.map_or(b.total, |x: f64| x.max(b.total)));
                }
            }
            EventKind::ModeSwitched => self.switched_to_auto = true,
            EventKind::IterationFailed => {
                let _: IterationFailed = decode(event)?;
                self.counters.failed += 1;
                self.close_iteration(Vec::new());
            }
            EventKind::IterationFinished => {
                let p: IterationFinished = decode(event)?;
                for (agent, ok) in &p.reliability {
                    self.reliability.entry(*agent).or_default().record(*ok);
                }
                // Retries accumulate across too_hard iterations and reset on accept.
                match p.outcome {
                    IterationOutcome::Restarted => self.counters.restarted += 1,
                    IterationOutcome::Accepted => self.consecutive_retries = p.retries,
                    IterationOutcome::TooHard => self.consecutive_retries += p.retries,
                }
                self.close_iteration(p.interventions);
            }
            EventKind::SessionEnded => self.counters.ended = true,
        }
        self.counters.events += 1;
        Ok(())
    }

    pub fn summary(&self) -> SessionSummary {
        let c = &self.counters;
        SessionSummary {
            session_id: self.session_id.clone(),
            iterations: c.iterations,
            failed_iterations: c.failed,
            restarted_iterations: c.restarted,
            best_scores: self.problems.iter().zip(&self.best).map(|(p, b)| (p.id.clone(), *b)).collect(),
            mean_best_score: self.mean_best(),
            top_score: self.best.iter().flatten().copied().fold(0.0, f64::max),
            tools_archived: c.archived,
            validated_tools: c.validated,
            too_hard_tools: c.too_hard,
            generated_codes: c.generated_codes,
            human_seconds: c.human_seconds,
            verdicts: c.verdicts.clone(),
            autofix_attempts: c.autofix,
            events: c.events,
            ended: c.ended,
        }
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            summary: self.summary(),
            states: self.states.clone(),
            pools: self.pools.clone(),
            tools: self.library.records().to_vec(),
        }
    }
}

/// Rebuilds a session purely from its log. The embedding provider comes from
/// the logged configuration.
pub fn replay_state(events: &[SessionEvent]) -> Result<SessionState, OrchestratorError> {
    if let Err(seq) = verify_chain(events) {
        return Err(OrchestratorError::CorruptLog {
            seq,
            reason: "hash chain broken".into(),
        });
    }
    let embedder = match events.first() {
        Some(first) if first.kind == EventKind::SessionStarted => {
            let p: SessionStarted = decode(first)?;
            p.config.embedding.build()
        }
        _ => Embedder::deterministic(),
    };
    let mut state = SessionState::new(embedder);
    for e in events {
        state.apply(e)?;
    }
    Ok(state)
}

pub fn replay(events: &[SessionEvent]) -> Result<SessionSnapshot, OrchestratorError> {
    let state = replay_state(events)?;
    if events.is_empty() {
        return Ok(SessionSnapshot {
            summary: state.summary(),
            states: Vec::new(),
            pools: BTreeMap::new(),
            tools: Vec::new(),
        });
    }
    Ok(state.snapshot())
}

/// Payload decoding helper for consumers of the log.
pub fn payload<T: DeserializeOwned>(event: &SessionEvent) -> Result<T, OrchestratorError> {
    decode(event)
}

pub(crate) fn to_payload<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("event payload serializes")
}
