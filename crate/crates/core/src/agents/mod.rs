//! The four agent roles, the reinforced dynamic prompt, feedback selection and
//! multi-candidate generation over a pluggable chat backend.

pub mod backend;

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::OnceLock;
use std::thread;
use std::time::Instant;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalized_similarity, EmbeddingError, EmbeddingVector};
use crate::library::{Novelty, Provenance, ToolMetrics, ToolRecord, ToolSpec, ToolStatus};
use crate::sandbox::{ExecutionReport, TestSuite, ToolCode};

pub use backend::{
    BackendConfig, BackendKind, ChatBackend, ChatRequest, RemoteChatBackend, RemoteChatConfig, ReplayScript,
    ScriptEntry, ScriptedBackend,
};

/// Temperature used when a single candidate is requested.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("invalid agent spec: {0}")]
    InvalidSpec(String),
    #[error("invalid temperature range [{lo}, {hi}] for {n} candidates")]
    InvalidRange { n: usize, lo: f64, hi: f64 },
    #[error("prompt needs ~{tokens} tokens, backend limit is {limit}")]
    SegmentOverflow { tokens: usize, limit: usize },
    #[error("chat backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("scripted replay exhausted for {agent} step {step} candidate {candidate}")]
    ReplayExhausted { agent: AgentKind, step: u64, candidate: usize },
    #[error("no candidate could be parsed: {0}")]
    AllCandidatesUnparseable(String),
    #[error("agent kind mismatch: expected {expected}, got {got}")]
    WrongAgent { expected: AgentKind, got: AgentKind },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Coach,
    Coder,
    Critic,
    Capitalizer,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Coach, AgentKind::Coder, AgentKind::Critic, AgentKind::Capitalizer];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Coach => "coach",
            AgentKind::Coder => "coder",
            AgentKind::Critic => "critic",
            AgentKind::Capitalizer => "capitalizer",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| AgentError::InvalidSpec(format!("unknown agent kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AutomationType {
    #[default]
    Automatic,
    PartialHuman,
    FullHuman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for TemperatureRange {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionStrategy {
    #[default]
    Recency,
    Diversity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    #[serde(default)]
    pub strategy: SelectionStrategy,
    /// Keep at least one negative and one positive item when the pool has them.
    #[serde(default = "yes")]
    pub balance_polarity: bool,
}

fn yes() -> bool {
    true
}

impl Default for FeedbackPolicy {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::Recency,
            balance_polarity: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    #[serde(default)]
    pub automation: AutomationType,
    pub role: String,
    #[serde(default)]
    pub constraints: Vec<String>,
    #[serde(default)]
    pub capabilities: Vec<String>,
    #[serde(default)]
    pub functions: Vec<String>,
    pub objective: String,
    /// Estimated success probability M.
    pub reliability: f64,
    /// Minimum acceptable reliability before human coverage becomes mandatory.
    pub risk_threshold: f64,
    pub candidates: usize,
    #[serde(default)]
    pub temperature: TemperatureRange,
    pub backend: String,
    pub feedback_budget: usize,
    #[serde(default)]
    pub feedback_policy: FeedbackPolicy,
}

impl AgentSpec {
    pub fn default_for(kind: AgentKind) -> Self {
        let (role, capabilities, candidates) = match kind {
            AgentKind::Coach => (
                "You are the Coach. You study the state of every problem example and the tool library, then specify the single most useful next tool.",
                vec!["read observations", "search tool library", "write tool specifications"],
                2,
            ),
            AgentKind::Coder => (
                "You are the Coder. You implement the requested tool as a self-contained function that transforms the document state.",
                vec!["write code", "read execution reports"],
                3,
            ),
            AgentKind::Critic => (
                "You are the Critic. You judge an implemented tool from its test report and score change and either accept it or give concrete instructions for another attempt.",
                vec!["read execution reports", "read score deltas"],
                1,
            ),
            AgentKind::Capitalizer => (
                "You are the Capitalizer. You describe a finished tool so that it can be found and reused later.",
                vec!["write tool descriptions"],
                1,
            ),
        };
        Self {
            kind,
            automation: AutomationType::Automatic,
            role: role.into(),
            constraints: vec!["Never invent target content you cannot observe.".into()],
            capabilities: capabilities.into_iter().map(String::from).collect(),
            functions: vec!["run(state, args) -> state".into()],
            objective: "Raise the composite score of every problem example.".into(),
            reliability: 0.8,
            risk_threshold: 0.5,
            candidates,
            temperature: TemperatureRange::default(),
            backend: "default".into(),
            feedback_budget: 6,
            feedback_policy: FeedbackPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0..=1.0).contains(&self.reliability) || !(0.0..=1.0).contains(&self.risk_threshold) {
            return Err(AgentError::InvalidSpec(format!("{}: reliability and risk threshold must be in [0,1]", self.kind)));
        }
        if self.candidates == 0 {
            return Err(AgentError::InvalidSpec(format!("{}: candidate count must be at least 1", self.kind)));
        }
        temperature_schedule(self.candidates, self.temperature.lo, self.temperature.hi)?;
        Ok(())
    }

    fn expect(&self, kind: AgentKind) -> Result<(), AgentError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(AgentError::WrongAgent {
                expected: kind,
                got: self.kind,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackSource {
    Human,
    AutomaticMacro,
    LlmCritic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackKind {
    Quantitative,
    Comparative,
    Corrective,
    Demonstrative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub id: String,
    pub source: FeedbackSource,
    pub kind: FeedbackKind,
    pub polarity: Polarity,
    pub agent: AgentKind,
    pub text: String,
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
    /// Pinned items are always selected first.
    #[serde(default)]
    pub pinned: bool,
}

impl FeedbackItem {
    pub fn is_macro(&self) -> bool {
        self.source == FeedbackSource::AutomaticMacro
    }

    fn render(&self) -> String {
        let source = match self.source {
            FeedbackSource::Human => "human",
            FeedbackSource::AutomaticMacro => "automatic",
            FeedbackSource::LlmCritic => "critic",
        };
        let kind = serde_json::to_value(self.kind).ok();
        let polarity = serde_json::to_value(self.polarity).ok();
        format!(
            "- [{} {} {}] {}",
            source,
            kind.as_ref().and_then(|v| v.as_str()).unwrap_or(""),
            polarity.as_ref().and_then(|v| v.as_str()).unwrap_or(""),
            self.text.trim()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    RoleGoalConstraints,
    StateObservation,
    Task,
    Examples,
    Feedbacks,
}

impl SegmentKind {
    pub const ORDER: [SegmentKind; 5] = [
        SegmentKind::RoleGoalConstraints,
        SegmentKind::StateObservation,
        SegmentKind::Task,
        SegmentKind::Examples,
        SegmentKind::Feedbacks,
    ];

    pub fn header(self) -> &'static str {
        match self {
            SegmentKind::RoleGoalConstraints => "=== ROLE-GOAL-CONSTRAINTS ===",
            SegmentKind::StateObservation => "=== STATE OBSERVATION ===",
            SegmentKind::Task => "=== TASK ===",
            SegmentKind::Examples => "=== EXAMPLES ===",
            SegmentKind::Feedbacks => "=== FEEDBACKS ===",
        }
    }
}

pub const EMPTY_SEGMENT: &str = "(empty)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role_goal_constraints: String,
    pub state_observation: String,
    pub task: String,
    pub examples: String,
    pub feedbacks: String,
    pub rendered: String,
    pub token_estimate: usize,
}

/// Rough token estimate: one token per four characters.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

impl PromptBundle {
    pub fn from_segments(segments: [String; 5]) -> Self {
        let mut rendered = String::new();
        for (kind, body) in SegmentKind::ORDER.iter().zip(&segments) {
            rendered.push_str(kind.header());
            rendered.push('\n');
            let body = if body.trim().is_empty() { EMPTY_SEGMENT } else { body.trim_end() };
            rendered.push_str(body);
            rendered.push_str("\n\n");
        }
        let token_estimate = estimate_tokens(&rendered);
        let [role_goal_constraints, state_observation, task, examples, feedbacks] = segments;
        Self {
            role_goal_constraints,
            state_observation,
            task,
            examples,
            feedbacks,
            rendered,
            token_estimate,
        }
    }

    pub fn segment(&self, kind: SegmentKind) -> &str {
        match kind {
            SegmentKind::RoleGoalConstraints => &self.role_goal_constraints,
            SegmentKind::StateObservation => &self.state_observation,
            SegmentKind::Task => &self.task,
            SegmentKind::Examples => &self.examples,
            SegmentKind::Feedbacks => &self.feedbacks,
        }
    }

    /// Recovers the segments of a rendered prompt. Returns `None` unless all
    /// five headers are present exactly once and in template order.
    pub fn split_rendered(rendered: &str) -> Option<Vec<(SegmentKind, String)>> {
        let mut found: Vec<(SegmentKind, usize, usize)> = Vec::new();
        let mut offset = 0;
        for line in rendered.split_inclusive('\n') {
            let trimmed = line.trim_end_matches('\n');
            if let Some(kind) = SegmentKind::ORDER.into_iter().find(|k| k.header() == trimmed) {
                found.push((kind, offset, offset + line.len()));
            }
            offset += line.len();
        }
        if found.len() != 5 || found.iter().zip(SegmentKind::ORDER).any(|(f, k)| f.0 != k) {
            return None;
        }
        Some(
            found
                .iter()
                .enumerate()
                .map(|(i, (kind, _, body_start))| {
                    let end = found.get(i + 1).map_or(rendered.len(), |n| n.1);
                    (*kind, rendered[*body_start..end].trim_end().to_owned())
                })
                .collect(),
        )
    }
}

fn role_segment(agent: &AgentSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "role: {}", agent.role.trim());
    let _ = writeln!(out, "goal: {}", agent.objective.trim());
    if !agent.capabilities.is_empty() {
        let _ = writeln!(out, "capabilities: {}", agent.capabilities.join("; "));
    }
    if !agent.functions.is_empty() {
        let _ = writeln!(out, "functions: {}", agent.functions.join("; "));
    }
    for c in &agent.constraints {
        let _ = writeln!(out, "constraint: {}", c.trim());
    }
    out
}

/// Assembles the five-segment prompt. Automatic (macro) feedback is rendered
/// into the state observation; every other item goes to FEEDBACKS.
pub fn build_rdp_prompt(
    agent: &AgentSpec,
    observation: &str,
    task: &str,
    examples: &[String],
    selected_feedback: &[FeedbackItem],
    token_limit: Option<usize>,
) -> Result<PromptBundle, AgentError> {
    let role = role_segment(agent);
    let mut state = observation.trim_end().to_owned();
    let macros: Vec<&FeedbackItem> = selected_feedback.iter().filter(|f| f.is_macro()).collect();
    if !macros.is_empty() {
        state.push_str("\nautomatic feedback:");
        for m in macros {
            state.push_str("\n- ");
            state.push_str(m.text.trim());
        }
    }
    let mut examples: Vec<&String> = examples.iter().collect();
    let mut micro: Vec<&FeedbackItem> = selected_feedback.iter().filter(|f| !f.is_macro()).collect();
    loop {
        let example_text = examples
            .iter()
            .enumerate()
            .map(|(i, e)| format!("example {}:\n{}", i + 1, e.trim_end()))
            .collect::<Vec<_>>()
            .join("\n\n");
        let feedback_text = micro.iter().map(|f| f.render()).collect::<Vec<_>>().join("\n");
        let bundle = PromptBundle::from_segments([role.clone(), state.clone(), task.to_owned(), example_text, feedback_text]);
        let Some(limit) = token_limit else { return Ok(bundle) };
        if bundle.token_estimate <= limit {
            return Ok(bundle);
        }
        if examples.pop().is_some() {
            continue;
        }
        let oldest = micro
            .iter()
            .enumerate()
            .min_by_key(|(i, f)| (f.pinned, f.created_at, *i))
            .map(|(i, _)| i);
        match oldest {
            Some(i) => {
                micro.remove(i);
            }
            None => {
                return Err(AgentError::SegmentOverflow {
                    tokens: bundle.token_estimate,
                    limit,
                })
            }
        }
    }
}

fn distance(a: &FeedbackItem, b: &FeedbackItem) -> f64 {
    match (&a.embedding, &b.embedding) {
        (Some(x), Some(y)) => normalized_similarity(x, y).map_or(1.0, |s| 1.0 - s),
        _ => 1.0,
    }
}

/// Indices of `pool` newest first (ties: later pool position first).
fn recency_order(pool: &[FeedbackItem]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool[b].created_at.cmp(&pool[a].created_at).then(b.cmp(&a)));
    order
}

/// Greedy max-min selection over `candidates` (already in seed order),
/// continuing from `selected`.
pub fn greedy_max_min(pool: &[FeedbackItem], candidates: &[usize], mut selected: Vec<usize>, budget: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = candidates.iter().copied().filter(|c| !selected.contains(c)).collect();
    if selected.is_empty() && !remaining.is_empty() && budget > 0 {
        selected.push(remaining.remove(0));
    }
    while selected.len() < budget && !remaining.is_empty() {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (pos, &c) in remaining.iter().enumerate() {
            let d = selected
                .iter()
                .map(|&s| distance(&pool[c], &pool[s]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best = pos;
                best_d = d;
            }
        }
        selected.push(remaining.remove(best));
    }
    selected
}

/// Picks at most `budget` items without touching the pool.
pub fn select_feedback(pool: &[FeedbackItem], policy: FeedbackPolicy, budget: usize) -> Vec<FeedbackItem> {
    if budget == 0 || pool.is_empty() {
        return Vec::new();
    }
    let order = recency_order(pool);
    let mut selected: Vec<usize> = order.iter().copied().filter(|&i| pool[i].pinned).take(budget).collect();
    let pinned_count = selected.len();
    let open: Vec<usize> = order.iter().copied().filter(|&i| !pool[i].pinned).collect();
    selected = match policy.strategy {
        SelectionStrategy::Recency => {
            selected.extend(open.iter().take(budget - pinned_count));
            selected
        }
        SelectionStrategy::Diversity => greedy_max_min(pool, &open, selected, budget),
    };
    if policy.balance_polarity && budget >= 2 {
        for wanted in [Polarity::Negative, Polarity::Positive] {
            if selected.iter().any(|&i| pool[i].polarity == wanted) {
                continue;
            }
            let Some(&incoming) = open.iter().find(|&&i| pool[i].polarity == wanted && !selected.contains(&i)) else {
                continue;
            };
            let replaceable = (pinned_count..selected.len()).rev().find(|&pos| {
                let p = pool[selected[pos]].polarity;
                p == Polarity::Neutral || selected.iter().filter(|&&i| pool[i].polarity == p).count() > 1
            });
            if let Some(pos) = replaceable {
                selected[pos] = incoming;
            }
        }
    }
    selected.into_iter().map(|i| pool[i].clone()).collect()
}

/// Evenly spaced temperatures for `n` parallel candidates.
pub fn temperature_schedule(n: usize, lo: f64, hi: f64) -> Result<Vec<f64>, AgentError> {
    if n == 0 || !(lo >= 0.0 && lo <= hi) || !hi.is_finite() {
        return Err(AgentError::InvalidRange { n, lo, hi });
    }
    if n == 1 {
        return Ok(vec![DEFAULT_TEMPERATURE]);
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n).map(|i| if i == n - 1 { hi } else { lo + step * i as f64 }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub text: String,
    pub temperature: f64,
    /// Set when the text came from a human rather than the backend.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub human: bool,
    #[serde(skip)]
    pub latency_ms: u64,
}

/// One completion per scheduled temperature, in schedule order. Requests fan
/// out concurrently; any failure fails the whole set.
pub fn generate_candidates(
    agent: &AgentSpec,
    prompt: &PromptBundle,
    backend: &dyn ChatBackend,
    step: u64,
) -> Result<Vec<Candidate>, AgentError> {
    let temperatures = temperature_schedule(agent.candidates, agent.temperature.lo, agent.temperature.hi)?;
    if let Some(limit) = backend.max_prompt_tokens() {
        if prompt.token_estimate > limit {
            return Err(AgentError::SegmentOverflow {
                tokens: prompt.token_estimate,
                limit,
            });
        }
    }
    let results: Vec<Result<Candidate, AgentError>> = thread::scope(|scope| {
        let handles: Vec<_> = temperatures
            .iter()
            .enumerate()
            .map(|(index, &temperature)| {
                let request = ChatRequest {
                    agent: agent.kind,
                    step,
                    candidate: index,
                    prompt: prompt.rendered.clone(),
                    temperature,
                };
                scope.spawn(move || {
                    let start = Instant::now();
                    let text = backend.complete(&request)?;
                    Ok(Candidate {
                        index,
                        text,
                        temperature,
                        human: false,
                        latency_ms: start.elapsed().as_millis() as u64,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(AgentError::BackendUnavailable("worker panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}

fn fenced_block<'a>(text: &'a str, tags: &[&str]) -> Option<&'a str> {
    static FENCE: OnceLock<Regex> = OnceLock::new();
    let re = FENCE.get_or_init(|| Regex::new(r"(?s)```([A-Za-z0-9_+-]*)[ \t]*\r?\n(.*?)```").expect("valid regex"));
    re.captures_iter(text).find_map(|c| {
        let tag = c.get(1).map_or("", |m| m.as_str());
        tags.iter()
            .any(|t| t.eq_ignore_ascii_case(tag))
            .then(|| c.get(2).map_or("", |m| m.as_str()))
    })
}

/// Parses a ```toolspec fenced block of `key: value` lines.
pub fn parse_tool_spec(text: &str) -> Result<ToolSpec, String> {
    let body = fenced_block(text, &["toolspec"]).ok_or("no ```toolspec block")?;
    let mut name = None;
    let mut purpose = None;
    let mut input = String::new();
    let mut output = String::new();
    let mut tests = Vec::new();
    let mut novelty = None;
    for line in body.lines() {
        let Some((key, value)) = line.split_once(':') else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(format!("line without a field tag: `{}`", line.trim()));
        };
        let value = value.trim().to_owned();
        match key.trim().to_ascii_lowercase().as_str() {
            "name" => name = Some(value),
            "purpose" => purpose = Some(value),
            "input" => input = value,
            "output" => output = value,
            "test" | "tests" => tests.extend(value.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from)),
            "novelty" => {
                novelty = Some(match value.to_ascii_lowercase().as_str() {
                    "new" => Novelty::New,
                    "improved" => Novelty::Improved,
                    "specialized" => Novelty::Specialized,
                    other => return Err(format!("unknown novelty `{other}`")),
                })
            }
            other => return Err(format!("unknown field `{other}`")),
        }
    }
    let name = name.filter(|n| !n.is_empty()).ok_or("missing field `name`")?;
    let purpose = purpose.filter(|p| !p.is_empty()).ok_or("missing field `purpose`")?;
    Ok(ToolSpec {
        name,
        purpose,
        input_contract: input,
        output_contract: output,
        test_plan: tests,
        novelty: novelty.ok_or("missing field `novelty`")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecProposal {
    pub candidate: usize,
    pub raw: String,
    pub spec: Option<ToolSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

pub fn parse_coach(candidates: &[Candidate]) -> Result<Vec<SpecProposal>, AgentError> {
    let proposals: Vec<SpecProposal> = candidates
        .iter()
        .map(|c| match parse_tool_spec(&c.text) {
            Ok(spec) => SpecProposal {
                candidate: c.index,
                raw: c.text.clone(),
                spec: Some(spec),
                parse_error: None,
            },
            Err(e) => SpecProposal {
                candidate: c.index,
                raw: c.text.clone(),
                spec: None,
                parse_error: Some(e),
            },
        })
        .collect();
    if proposals.iter().all(|p| p.spec.is_none()) {
        let reasons: Vec<String> = proposals.iter().filter_map(|p| p.parse_error.clone()).collect();
        return Err(AgentError::AllCandidatesUnparseable(reasons.join("; ")));
    }
    Ok(proposals)
}

pub const COACH_TASK: &str = "Specify the single most useful next tool for the problem examples above. \
Reuse or improve library tools when that helps. Answer with one fenced block:\n\
```toolspec\nname: <snake_case name>\npurpose: <one sentence>\ninput: <what the tool reads>\noutput: <what the tool changes>\ntests: <check>; <check>\nnovelty: new | improved | specialized\n```";

pub fn coach_prompt(
    agent: &AgentSpec,
    observation: &str,
    library_digest: &str,
    examples: &[String],
    feedback: &[FeedbackItem],
    token_limit: Option<usize>,
) -> Result<PromptBundle, AgentError> {
    agent.expect(AgentKind::Coach)?;
    let observation = format!("{}\n\ntool library: {}", observation.trim_end(), library_digest.trim());
    build_rdp_prompt(agent, &observation, COACH_TASK, examples, feedback, token_limit)
}

pub fn coach_propose(
    observation: &str,
    library_digest: &str,
    agent: &AgentSpec,
    backend: &dyn ChatBackend,
    step: u64,
    feedback: &[FeedbackItem],
) -> Result<Vec<SpecProposal>, AgentError> {
    let prompt = coach_prompt(agent, observation, library_digest, &[], feedback, backend.max_prompt_tokens())?;
    parse_coach(&generate_candidates(agent, &prompt, backend, step)?)
}

/// Extracts tool code from a Coder answer: a ```python (or untagged) block,
/// or the whole answer when it is bare code.
pub fn parse_code(text: &str) -> Option<ToolCode> {
    let source = fenced_block(text, &["python", "py", ""])
        .map(str::to_owned)
        .or_else(|| (text.contains("def ") && !text.contains("```")).then(|| text.to_owned()))?;
    (!source.trim().is_empty()).then(|| ToolCode::python(source))
}

fn state_contract() -> &'static str {
    "Write Python defining `def run(state, args):` that returns the updated state. \
state is a JSON object: {\"title\", \"abstract\", \"plan\": {\"title\", \"children\": [...]}, \
\"sections\": [{\"path\": \"1/2\", \"content\"}], \"references\": [str]}. \
Section paths are 1-based child indices into the plan. No network access. \
Answer with one ```python block."
}

pub fn coder_prompt(
    agent: &AgentSpec,
    spec: &ToolSpec,
    observation: &str,
    retry_instructions: Option<&str>,
    examples: &[String],
    feedback: &[FeedbackItem],
    token_limit: Option<usize>,
) -> Result<PromptBundle, AgentError> {
    agent.expect(AgentKind::Coder)?;
    let mut task = format!(
        "Implement tool `{}`.\npurpose: {}\ninput: {}\noutput: {}\n",
        spec.name, spec.purpose, spec.input_contract, spec.output_contract
    );
    if !spec.test_plan.is_empty() {
        let _ = writeln!(task, "tests to satisfy: {}", spec.test_plan.join("; "));
    }
    if let Some(instr) = retry_instructions.filter(|s| !s.trim().is_empty()) {
        let _ = writeln!(task, "previous attempt was rejected: {}", instr.trim());
    }
    task.push_str(state_contract());
    build_rdp_prompt(agent, observation, &task, examples, feedback, token_limit)
}

/// Prompt for one automatic repair of failing code.
pub fn repair_prompt(
    agent: &AgentSpec,
    spec: &ToolSpec,
    code: &ToolCode,
    report: &ExecutionReport,
    token_limit: Option<usize>,
) -> Result<PromptBundle, AgentError> {
    agent.expect(AgentKind::Coder)?;
    let observation = format!("validation failed:\n{}", report.diagnostics_text());
    let task = format!(
        "Fix tool `{}` ({}). Current code:\n```python\n{}\n```\n{}",
        spec.name,
        spec.purpose,
        code.source.trim_end(),
        state_contract()
    );
    build_rdp_prompt(agent, &observation, &task, &[], &[], token_limit)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Retry { instructions: String },
    TooHard { reason: String },
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Accept => "accept",
            Verdict::Retry { .. } => "retry",
            Verdict::TooHard { .. } => "too_hard",
        }
    }
}

/// Reads `VERDICT:` and `INSTRUCTIONS:` lines. Unreadable answers count as retry.
pub fn parse_verdict(text: &str) -> (String, String) {
    let mut verdict = String::new();
    let mut instructions = Vec::new();
    let mut in_instructions = false;
    for line in text.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_ascii_uppercase();
        if upper.starts_with("VERDICT:") {
            verdict = trimmed[8..].trim().to_ascii_lowercase().replace(['-', ' '], "_");
            in_instructions = false;
        } else if upper.starts_with("INSTRUCTIONS:") {
            instructions.push(trimmed[13..].trim().to_owned());
            in_instructions = true;
        } else if in_instructions && !trimmed.is_empty() {
            instructions.push(trimmed.to_owned());
        }
    }
    (verdict, instructions.join("\n").trim().to_owned())
}

/// Applies the hard gates to a parsed Critic answer: failing tests or a
/// negative measured delta never accept, and once no retries remain every
/// non-accept becomes too_hard.
pub fn critic_decide(
    verdict: &str,
    instructions: &str,
    report: &ExecutionReport,
    delta: Option<f64>,
    retries_remaining: u32,
) -> Verdict {
    let gate = if !report.passed() {
        Some(format!("tests failed: {}", report.diagnostics_text()))
    } else if delta.is_some_and(|d| d < 0.0) {
        Some(format!("score dropped by {:.2}", -delta.unwrap_or(0.0)))
    } else {
        None
    };
    let wants_accept = verdict == "accept" && gate.is_none();
    if wants_accept {
        return Verdict::Accept;
    }
    let mut text = instructions.trim().to_owned();
    if let Some(g) = gate {
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&g);
    }
    if text.is_empty() {
        text = "The tool did not improve the documents; revise it to add observable content.".into();
    }
    if retries_remaining == 0 {
        Verdict::TooHard { reason: text }
    } else {
        Verdict::Retry { instructions: text }
    }
}

pub const CRITIC_TASK: &str = "Judge the tool. Answer with\nVERDICT: accept | retry\nINSTRUCTIONS: <concrete changes when retrying>";

pub fn critic_prompt(
    agent: &AgentSpec,
    spec: &ToolSpec,
    code: &ToolCode,
    report: &ExecutionReport,
    delta: Option<f64>,
    retries_remaining: u32,
    feedback: &[FeedbackItem],
    token_limit: Option<usize>,
) -> Result<PromptBundle, AgentError> {
    agent.expect(AgentKind::Critic)?;
    let mut observation = format!("tool `{}`: {}\n", spec.name, spec.purpose);
    let _ = writeln!(
        observation,
        "tests: {} of {} passed",
        report.tests.len() - report.failed_count().min(report.tests.len()),
        report.tests.len()
    );
    if !report.passed() {
        let _ = writeln!(observation, "diagnostics:\n{}", report.diagnostics_text());
    }
    match delta {
        Some(d) => {
            let _ = writeln!(observation, "mean score delta: {d:+.2}");
        }
        None => observation.push_str("mean score delta: not measurable\n"),
    }
    let _ = write!(observation, "retries remaining: {retries_remaining}");
    let task = format!("{CRITIC_TASK}\nCode under review:\n```python\n{}\n```", code.source.trim_end());
    build_rdp_prompt(agent, &observation, &task, &[], feedback, token_limit)
}

#[allow(clippy::too_many_arguments)]
pub fn critic_evaluate(
    spec: &ToolSpec,
    code: &ToolCode,
    report: &ExecutionReport,
    delta: Option<f64>,
    retries_remaining: u32,
    agent: &AgentSpec,
    backend: &dyn ChatBackend,
    step: u64,
) -> Result<Verdict, AgentError> {
    let prompt = critic_prompt(agent, spec, code, report, delta, retries_remaining, &[], backend.max_prompt_tokens())?;
    let candidates = generate_candidates(agent, &prompt, backend, step)?;
    let (verdict, instructions) = parse_verdict(&candidates[0].text);
    Ok(critic_decide(&verdict, &instructions, report, delta, retries_remaining))
}

pub const CAPITALIZER_TASK: &str = "Describe the tool for the library. Answer with\nDESCRIPTION: <what it does and when it helps>\nUSAGE: <how to call it>";

pub fn capitalizer_prompt(
    agent: &AgentSpec,
    spec: &ToolSpec,
    code: &ToolCode,
    report: &ExecutionReport,
    verdict: &Verdict,
    token_limit: Option<usize>,
) -> Result<PromptBundle, AgentError> {
    agent.expect(AgentKind::Capitalizer)?;
    let observation = format!(
        "tool `{}`: {}\nverdict: {}\nvalidation: {}",
        spec.name,
        spec.purpose,
        verdict.label(),
        if report.passed() { "passed" } else { "failed" }
    );
    let task = format!("{CAPITALIZER_TASK}\n```python\n{}\n```", code.source.trim_end());
    build_rdp_prompt(agent, &observation, &task, &[], &[], token_limit)
}

/// Reads `DESCRIPTION:` and `USAGE:` lines, falling back to the spec purpose.
pub fn parse_capitalization(text: &str, spec: &ToolSpec) -> (String, String) {
    let mut description = Vec::new();
    let mut usage = Vec::new();
    // 0: outside any field, 1: description, 2: usage
    let mut field = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_ascii_uppercase();
        if upper.starts_with("DESCRIPTION:") {
            description.push(trimmed[12..].trim().to_owned());
            field = 1;
        } else if upper.starts_with("USAGE:") {
            usage.push(trimmed[6..].trim().to_owned());
            field = 2;
        } else if !trimmed.is_empty() {
            match field {
                1 => description.push(trimmed.to_owned()),
                2 => usage.push(trimmed.to_owned()),
                _ => {}
            }
        }
    }
    let description = description.join(" ").trim().to_owned();
    let description = if description.is_empty() { spec.purpose.clone() } else { description };
    (description, usage.join(" ").trim().to_owned())
}

/// Builds the library draft for a finished tool.
#[allow(clippy::too_many_arguments)]
pub fn capitalization_draft(
    spec: &ToolSpec,
    code: &ToolCode,
    tests: &TestSuite,
    report: &ExecutionReport,
    verdict: &Verdict,
    metrics: ToolMetrics,
    provenance: Provenance,
    answer: &str,
) -> ToolRecord {
    let (description, usage) = parse_capitalization(answer, spec);
    ToolRecord {
        id: String::new(),
        name: spec.name.clone(),
        description,
        usage,
        spec: spec.clone(),
        code: code.clone(),
        tests: tests.clone(),
        last_report: report.clone(),
        status: if matches!(verdict, Verdict::Accept) { ToolStatus::Validated } else { ToolStatus::TooHard },
        metrics,
        description_embedding: None,
        provenance,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn capitalizer_summarize(
    spec: &ToolSpec,
    code: &ToolCode,
    tests: &TestSuite,
    report: &ExecutionReport,
    verdict: &Verdict,
    metrics: ToolMetrics,
    provenance: Provenance,
    agent: &AgentSpec,
    backend: &dyn ChatBackend,
    step: u64,
) -> Result<ToolRecord, AgentError> {
    let prompt = capitalizer_prompt(agent, spec, code, report, verdict, backend.max_prompt_tokens())?;
    let candidates = generate_candidates(agent, &prompt, backend, step)?;
    Ok(capitalization_draft(spec, code, tests, report, verdict, metrics, provenance, &candidates[0].text))
}

#[cfg(test)]
mod tests;
