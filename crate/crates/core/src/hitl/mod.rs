//! Human guidance: decision types, trigger heuristics, benefit estimates,
//! feedback capture, the guidance queue and the human-steered backend wrapper.

pub mod knapsack;
pub mod queue;
pub mod wrapper;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use similar::{ChangeTag, TextDiff};

use crate::agents::{AgentError, AgentKind, Candidate, FeedbackItem, FeedbackKind, FeedbackSource, Polarity, PromptBundle};

pub use knapsack::{
    select_interventions, select_interventions_bnb, Feasibility, InterventionCandidate, InterventionPlan,
};
pub use queue::{Acknowledgement, GuidanceQueue, HumanChannel, QueueHuman, ScriptedDecision, ScriptedHuman, ScriptedHumanFile};
pub use wrapper::{HitlEvent, HookPlan, HumanLlm, StepOutcome, StepRequest, MAX_REGENERATIONS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HitlError {
    #[error("guidance request `{0}` timed out without a default action")]
    GuidanceTimeout(String),
    #[error("unknown guidance request `{0}`")]
    UnknownRequest(String),
    #[error("action `{action}` is not legal in the {phase} phase")]
    IllegalActionForPhase { action: String, phase: Phase },
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("invalid intervention instance: {0}")]
    InvalidInstance(String),
    #[error("no human channel available for agent {0}")]
    NoChannel(AgentKind),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PreInference,
    PostInference,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::PreInference => "pre-inference",
            Phase::PostInference => "post-inference",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DeadlinePolicy {
    Block,
    TimeoutToAuto { seconds: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "kebab-case")]
pub enum GuidancePayload {
    PreInference {
        prompt: PromptBundle,
    },
    PostInference {
        candidates: Vec<Candidate>,
        /// Per-candidate execution reports or other annotations, same order.
        #[serde(default)]
        reports: Vec<serde_json::Value>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRequest {
    pub id: String,
    pub session_id: String,
    pub agent: AgentKind,
    pub step: u64,
    pub phase: Phase,
    pub payload: GuidancePayload,
    pub deadline: DeadlinePolicy,
}

impl GuidanceRequest {
    pub fn make_id(session_id: &str, agent: AgentKind, step: u64, phase: Phase) -> String {
        format!("{session_id}:{agent}:{step}:{phase}")
    }

    /// Resolution applied when the deadline passes: pre proceeds, post selects
    /// the best-ranked candidate.
    pub fn auto_action(&self) -> GuidanceAction {
        match &self.payload {
            GuidancePayload::PreInference { .. } => GuidanceAction::Proceed,
            GuidancePayload::PostInference { candidates, reports } => {
                let rank = |i: usize| {
                    reports
                        .get(i)
                        .and_then(|r| r.get("rank_score"))
                        .and_then(|v| v.as_f64())
                        .unwrap_or(0.0)
                };
                let best = (0..candidates.len())
                    .reduce(|best, i| if rank(i) > rank(best) { i } else { best })
                    .unwrap_or(0);
                GuidanceAction::Select { index: best }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case")]
pub enum GuidanceAction {
    // pre-inference
    /// Replacement prompt, rendered with the five segment headers.
    ModifyPrompt { rendered: String },
    AddInstructions { text: String },
    AnswerDirectly { text: String },
    SetCandidateCount { n: usize },
    SwitchBackend { backend: String },
    Proceed,
    // post-inference
    Select { index: usize },
    Reject { indices: Vec<usize> },
    Regenerate { instructions: String },
    EditInline { index: usize, text: String },
    Annotate { notes: String },
    Score { value: f64 },
    Restart,
}

impl GuidanceAction {
    pub fn name(&self) -> &'static str {
        match self {
            GuidanceAction::ModifyPrompt { .. } => "modify-prompt",
            GuidanceAction::AddInstructions { .. } => "add-instructions",
            GuidanceAction::AnswerDirectly { .. } => "answer-directly",
            GuidanceAction::SetCandidateCount { .. } => "set-candidate-count",
            GuidanceAction::SwitchBackend { .. } => "switch-backend",
            GuidanceAction::Proceed => "proceed",
            GuidanceAction::Select { .. } => "select",
            GuidanceAction::Reject { .. } => "reject",
            GuidanceAction::Regenerate { .. } => "regenerate",
            GuidanceAction::EditInline { .. } => "edit-inline",
            GuidanceAction::Annotate { .. } => "annotate",
            GuidanceAction::Score { .. } => "score",
            GuidanceAction::Restart => "restart",
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            GuidanceAction::ModifyPrompt { .. }
            | GuidanceAction::AddInstructions { .. }
            | GuidanceAction::AnswerDirectly { .. }
            | GuidanceAction::SetCandidateCount { .. }
            | GuidanceAction::SwitchBackend { .. }
            | GuidanceAction::Proceed => Phase::PreInference,
            _ => Phase::PostInference,
        }
    }

    /// Checks the action against the request it answers.
    pub fn validate_for(&self, request: &GuidanceRequest) -> Result<(), HitlError> {
        if self.phase() != request.phase {
            return Err(HitlError::IllegalActionForPhase {
                action: self.name().into(),
                phase: request.phase,
            });
        }
        let count = match &request.payload {
            GuidancePayload::PostInference { candidates, .. } => candidates.len(),
            GuidancePayload::PreInference { .. } => 0,
        };
        let bad = |i: &usize| *i >= count;
        match self {
            GuidanceAction::Select { index } | GuidanceAction::EditInline { index, .. } if bad(index) => {
                Err(HitlError::InvalidDecision(format!("candidate {index} does not exist")))
            }
            GuidanceAction::Reject { indices } if indices.iter().any(bad) => {
                Err(HitlError::InvalidDecision("rejected candidate does not exist".into()))
            }
            GuidanceAction::SetCandidateCount { n: 0 } => Err(HitlError::InvalidDecision("candidate count must be >= 1".into())),
            GuidanceAction::ModifyPrompt { rendered } if PromptBundle::split_rendered(rendered).is_none() => Err(
                HitlError::InvalidDecision("modified prompt must keep the five segment headers in order".into()),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceDecision {
    pub request_id: String,
    pub action: GuidanceAction,
    #[serde(default)]
    pub operator: String,
    #[serde(default)]
    pub human_seconds: f64,
    /// Resolved by the deadline policy rather than a person.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub automatic: bool,
}

/// Context needed to turn a decision into feedback items.
#[derive(Debug, Clone)]
pub struct FeedbackContext<'a> {
    pub agent: AgentKind,
    pub iteration: u64,
    pub step: u64,
    pub candidates: &'a [Candidate],
}

const DIFF_LINE_CAP: usize = 40;

/// Compact line diff: a `+a -b lines` header followed by changed lines.
pub fn diff_summary(old: &str, new: &str) -> String {
    let diff = TextDiff::from_lines(old, new);
    let (mut added, mut removed) = (0, 0);
    let mut lines = Vec::new();
    for change in diff.iter_all_changes() {
        let sign = match change.tag() {
            ChangeTag::Insert => {
                added += 1;
                '+'
            }
            ChangeTag::Delete => {
                removed += 1;
                '-'
            }
            ChangeTag::Equal => continue,
        };
        if lines.len() < DIFF_LINE_CAP {
            lines.push(format!("{sign} {}", change.value().trim_end()));
        }
    }
    let mut out = format!("+{added} -{removed} lines");
    for l in lines {
        out.push('\n');
        out.push_str(&l);
    }
    out
}

/// Classifies a decision into micro feedback: scores are quantitative,
/// selections and rejections comparative, edits, regeneration requests,
/// instructions and notes corrective, direct answers demonstrative.
pub fn record_feedback(decision: &GuidanceDecision, ctx: &FeedbackContext<'_>) -> Vec<FeedbackItem> {
    let item = |n: usize, kind, polarity, text: String| FeedbackItem {
        id: format!("fb-{}-{}-{}-{}", ctx.iteration, ctx.agent, ctx.step, n),
        source: FeedbackSource::Human,
        kind,
        polarity,
        agent: ctx.agent,
        text,
        created_at: ctx.iteration,
        embedding: None,
        pinned: false,
    };
    let list = |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
    if decision.automatic {
        return Vec::new();
    }
    match &decision.action {
        GuidanceAction::Score { value } => vec![item(0, FeedbackKind::Quantitative, Polarity::Neutral, format!("human score {value}"))],
        GuidanceAction::Select { index } => {
            let losers: Vec<usize> = (0..ctx.candidates.len()).filter(|i| i != index).collect();
            let mut text = format!("preferred candidate {index}");
            if !losers.is_empty() {
                text.push_str(&format!(" over {}", list(&losers)));
            }
            if let Some(c) = ctx.candidates.get(*index) {
                text.push_str(&format!(": {}", excerpt(&c.text)));
            }
            vec![item(0, FeedbackKind::Comparative, Polarity::Positive, text)]
        }
        GuidanceAction::Reject { indices } => {
            vec![item(0, FeedbackKind::Comparative, Polarity::Negative, format!("rejected candidates {}", list(indices)))]
        }
        GuidanceAction::EditInline { index, text } => {
            let old = ctx.candidates.get(*index).map_or("", |c| c.text.as_str());
            vec![item(
                0,
                FeedbackKind::Corrective,
                Polarity::Negative,
                format!("edited candidate {index}: {}", diff_summary(old, text)),
            )]
        }
        GuidanceAction::Regenerate { instructions } => {
            vec![item(0, FeedbackKind::Corrective, Polarity::Negative, format!("regenerate: {}", instructions.trim()))]
        }
        GuidanceAction::AddInstructions { text } => {
            vec![item(0, FeedbackKind::Corrective, Polarity::Neutral, text.trim().to_owned())]
        }
        GuidanceAction::Annotate { notes } => vec![item(0, FeedbackKind::Corrective, Polarity::Neutral, notes.trim().to_owned())],
        GuidanceAction::AnswerDirectly { text } => {
            vec![item(0, FeedbackKind::Demonstrative, Polarity::Positive, format!("operator answer: {}", excerpt(text)))]
        }
        GuidanceAction::ModifyPrompt { .. }
        | GuidanceAction::SetCandidateCount { .. }
        | GuidanceAction::SwitchBackend { .. }
        | GuidanceAction::Proceed
        | GuidanceAction::Restart => Vec::new(),
    }
}

fn excerpt(text: &str) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= 160 {
        flat
    } else {
        format!("{}...", flat.chars().take(160).collect::<String>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    /// Always-on (agent, phase) pairs.
    #[serde(default)]
    pub manual: Vec<(AgentKind, Phase)>,
    #[serde(default = "default_retry_threshold")]
    pub retry_threshold: u32,
    #[serde(default = "default_stagnation_window")]
    pub stagnation_window: usize,
    #[serde(default = "yes")]
    pub first_iteration: bool,
}

fn default_retry_threshold() -> u32 {
    2
}

fn default_stagnation_window() -> usize {
    3
}

fn yes() -> bool {
    true
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            manual: Vec::new(),
            retry_threshold: default_retry_threshold(),
            stagnation_window: default_stagnation_window(),
            first_iteration: true,
        }
    }
}

/// What the trigger heuristics look at.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriggerContext {
    pub iteration: u64,
    pub consecutive_retries: u32,
    /// Best mean score after each completed iteration, oldest first.
    pub best_scores: Vec<f64>,
}

/// One flag per (agent, phase) slot in `slots`.
pub fn evaluate_triggers(ctx: &TriggerContext, config: &TriggerConfig, slots: &[(AgentKind, Phase)]) -> Vec<bool> {
    let mut on: Vec<(AgentKind, Phase)> = config.manual.clone();
    if config.first_iteration && ctx.iteration == 0 {
        on.push((AgentKind::Coach, Phase::PreInference));
        on.push((AgentKind::Coder, Phase::PreInference));
    }
    if config.retry_threshold > 0 && ctx.consecutive_retries >= config.retry_threshold {
        on.push((AgentKind::Coder, Phase::PostInference));
    }
    let w = config.stagnation_window;
    if w > 0 && ctx.best_scores.len() > w {
        let last = ctx.best_scores[ctx.best_scores.len() - 1];
        let reference = ctx.best_scores[ctx.best_scores.len() - 1 - w];
        if last <= reference {
            on.push((AgentKind::Coach, Phase::PreInference));
            on.push((AgentKind::Coder, Phase::PreInference));
        }
    }
    slots.iter().map(|s| on.contains(s)).collect()
}

/// One finished iteration as seen by the benefit estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionHistory {
    pub delta: f64,
    pub interventions: Vec<(AgentKind, Phase)>,
}

pub const DEFAULT_BENEFIT_PRIOR: f64 = 1.0;

/// Mean delta with the (phase, agent) intervention minus mean delta without,
/// floored at zero; `prior` until both groups have data.
pub fn estimate_benefit(history: &[InterventionHistory], phase: Phase, agent: AgentKind, prior: f64) -> f64 {
    let (with, without): (Vec<&InterventionHistory>, Vec<&InterventionHistory>) =
        history.iter().partition(|h| h.interventions.contains(&(agent, phase)));
    if with.is_empty() || without.is_empty() {
        return prior;
    }
    let mean = |xs: &[&InterventionHistory]| xs.iter().map(|h| h.delta).sum::<f64>() / xs.len() as f64;
    (mean(&with) - mean(&without)).max(0.0)
}

pub const RELIABILITY_WINDOW: usize = 10;
pub const RELIABILITY_PRIOR: f64 = 0.8;

/// Sliding-window success rate of one agent's outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTracker {
    window: VecDeque<bool>,
}

impl ReliabilityTracker {
    pub fn record(&mut self, success: bool) {
        if self.window.len() == RELIABILITY_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(success);
    }

    pub fn value(&self) -> f64 {
        if self.window.is_empty() {
            RELIABILITY_PRIOR
        } else {
            self.window.iter().filter(|s| **s).count() as f64 / self.window.len() as f64
        }
    }
}
