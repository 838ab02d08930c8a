//! Problem environment: each problem example owns an evolving document state
//! that starts empty and is stepped by tools toward a (possibly hidden) target.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{token_count, DocumentRecord, PlanNode, Section};
use crate::embedding::Embedder;
use crate::sandbox::{ExecutionReport, Sandbox, SandboxError, StateOracle, ToolCode};
use crate::scoring::{align_plans, compute_score, DocumentView, ScoreBreakdown, ScoreConfig, ScoringError};

/// Number of recent step results rendered into observations.
pub const OBSERVED_STEPS: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("tool execution failed: {0}")]
    ToolExecutionFailed(String),
    #[error("tool returned an invalid state: {0}")]
    StateSchemaViolation(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: String,
    pub goal: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub target: Option<DocumentRecord>,
    #[serde(default)]
    pub actions: Vec<String>,
    #[serde(default)]
    pub score: ScoreConfig,
}

impl ProblemInstance {
    /// A hidden-reference problem: only the title and abstract are given.
    pub fn from_record(record: DocumentRecord, score: ScoreConfig) -> Self {
        Self {
            id: record.id.clone(),
            goal: format!(
                "Produce a complete document titled \"{}\" with a structured plan, section contents and references.",
                record.title
            ),
            title: record.title.clone(),
            abstract_text: record.abstract_text.clone(),
            target: Some(record),
            actions: vec![
                "create or reorganize the plan".into(),
                "write section content".into(),
                "add references".into(),
            ],
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentState {
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    pub plan: PlanNode,
    #[serde(default)]
    pub sections: Vec<Section>,
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub revision: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_breakdown: Option<ScoreBreakdown>,
}

impl DocumentView for DocumentState {
    fn title(&self) -> &str {
        &self.title
    }
    fn plan(&self) -> &PlanNode {
        &self.plan
    }
    fn sections(&self) -> &[Section] {
        &self.sections
    }
    fn references(&self) -> &[String] {
        &self.references
    }
}

/// The wire form tools receive and return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireState {
    title: String,
    #[serde(rename = "abstract", default)]
    abstract_text: String,
    plan: WireNode,
    #[serde(default)]
    sections: Vec<Section>,
    #[serde(default)]
    references: Vec<String>,
    #[serde(default)]
    revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WireNode {
    title: String,
    #[serde(default)]
    depth: usize,
    #[serde(default)]
    children: Vec<WireNode>,
    #[serde(default)]
    content_token_count: usize,
}

impl WireNode {
    fn into_plan(self, depth: usize) -> PlanNode {
        PlanNode {
            title: self.title.trim().to_owned(),
            depth,
            children: self.children.into_iter().map(|c| c.into_plan(depth + 1)).collect(),
            content_token_count: 0,
        }
    }
}

impl DocumentState {
    pub fn to_wire(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("state serializes");
        if let Value::Object(map) = &mut v {
            map.remove("last_breakdown");
        }
        v
    }

    /// Parses and normalizes a tool's returned state: depths and token counts
    /// are recomputed, section paths must resolve and be unique.
    pub fn from_wire(value: &Value) -> Result<Self, EnvError> {
        let wire: WireState =
            serde_json::from_value(value.clone()).map_err(|e| EnvError::StateSchemaViolation(e.to_string()))?;
        if wire.title.trim().is_empty() {
            return Err(EnvError::StateSchemaViolation("title is empty".into()));
        }
        let mut plan = wire.plan.into_plan(1);
        let mut seen = HashSet::new();
        let mut sections = Vec::with_capacity(wire.sections.len());
        for s in wire.sections {
            if s.path.depth() == 0 || !seen.insert(s.path.clone()) {
                return Err(EnvError::StateSchemaViolation(format!("duplicate or root section path `{}`", s.path)));
            }
            let Some(node) = plan.resolve_mut(&s.path) else {
                return Err(EnvError::StateSchemaViolation(format!("section path `{}` not in plan", s.path)));
            };
            let content = s.content.trim().to_owned();
            node.content_token_count = token_count(&content);
            if !content.is_empty() {
                sections.push(Section { path: s.path, content });
            }
        }
        let mut refs: Vec<String> = Vec::new();
        for r in wire.references {
            let r = r.split_whitespace().collect::<Vec<_>>().join(" ");
            if !r.is_empty() && !refs.contains(&r) {
                refs.push(r);
            }
        }
        Ok(Self {
            title: wire.title.trim().to_owned(),
            abstract_text: wire.abstract_text,
            plan,
            sections,
            references: refs,
            revision: wire.revision,
            last_breakdown: None,
        })
    }

    /// Structural content equality, ignoring revision and cached score.
    pub fn same_content(&self, other: &Self) -> bool {
        self.title == other.title
            && self.abstract_text == other.abstract_text
            && self.plan == other.plan
            && self.sections == other.sections
            && self.references == other.references
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub problem_id: String,
    pub revision: u64,
    pub score_before: Option<f64>,
    pub score_after: Option<f64>,
    pub delta: f64,
    pub tool_id: String,
    pub diagnostics: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum GoalDistance {
    Score(f64),
    PendingHumanEvaluation,
}

/// One problem example with its scoring provider.
#[derive(Debug, Clone)]
pub struct ProblemEnv {
    pub problem: ProblemInstance,
    embedder: Embedder,
}

impl ProblemEnv {
    pub fn new(problem: ProblemInstance, embedder: Embedder) -> Self {
        Self { problem, embedder }
    }

    pub fn id(&self) -> &str {
        &self.problem.id
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn reset(&self) -> DocumentState {
        DocumentState {
            title: self.problem.title.clone(),
            abstract_text: self.problem.abstract_text.clone(),
            plan: PlanNode::root(self.problem.title.clone()),
            sections: Vec::new(),
            references: Vec::new(),
            revision: 0,
            last_breakdown: None,
        }
    }

    pub fn score(&self, state: &DocumentState) -> Result<Option<ScoreBreakdown>, EnvError> {
        match &self.problem.target {
            Some(target) => Ok(Some(compute_score(state, target, &self.problem.score, &self.embedder)?)),
            None => Ok(None),
        }
    }

    pub fn goal_distance(&self, state: &DocumentState) -> Result<GoalDistance, EnvError> {
        Ok(match self.score(state)? {
            Some(b) => GoalDistance::Score(100.0 - b.total),
            None => GoalDistance::PendingHumanEvaluation,
        })
    }

    /// Runs `code` on a serialized copy of `state`. On success returns the new,
    /// scored state; the input state is never modified.
    pub fn apply_tool(
        &self,
        state: &DocumentState,
        tool_id: &str,
        code: &ToolCode,
        args: &Value,
        sandbox: &Sandbox,
    ) -> Result<(DocumentState, StepResult), EnvError> {
        let invocation = sandbox.invoke(code, &state.to_wire(), args, None)?;
        let Some(out) = invocation.state() else {
            return Err(EnvError::ToolExecutionFailed(invocation.failure_text().unwrap_or_default()));
        };
        let mut next = DocumentState::from_wire(out)?;
        let before = match state.last_breakdown {
            Some(b) => Some(b),
            None => self.score(state)?,
        };
        let after = self.score(&next)?;
        next.revision = state.revision + 1;
        next.last_breakdown = after;
        let (score_before, score_after) = (before.map(|b| b.total), after.map(|b| b.total));
        let delta = match (score_before, score_after) {
            (Some(b), Some(a)) => a - b,
            _ => 0.0,
        };
        let step = StepResult {
            problem_id: self.problem.id.clone(),
            revision: next.revision,
            score_before,
            score_after,
            delta,
            tool_id: tool_id.to_owned(),
            diagnostics: invocation.stderr.trim().to_owned(),
        };
        Ok((next, step))
    }

    /// Agent-visible rendering of the problem. Exposes aggregate metrics and
    /// unmatched-path counts only, never target text.
    pub fn observe(&self, state: &DocumentState, recent: &[StepResult], library_digest: &str) -> Result<String, EnvError> {
        let mut out = String::new();
        let _ = writeln!(out, "problem: {}", self.problem.id);
        let _ = writeln!(out, "goal: {}", self.problem.goal);
        let _ = writeln!(out, "revision: {}", state.revision);
        let _ = writeln!(
            out,
            "state: {} plan nodes, {} sections, {} content tokens, {} references",
            state.plan.node_count(),
            state.sections.len(),
            state.content_tokens(),
            state.references.len()
        );
        if let Some(target) = &self.problem.target {
            let b = match state.last_breakdown {
                Some(b) => b,
                None => compute_score(state, target, &self.problem.score, &self.embedder)?,
            };
            let alignment = align_plans(&state.plan, &target.plan, &self.embedder)?;
            let _ = writeln!(
                out,
                "score: total={:.2} plan={:.3} titles={:.3} contents={:.3} refs={:.3} length={:.3} coverage={:.3}",
                b.total, b.sim_plan, b.sim_titles, b.sim_contents, b.sim_refs, b.ratio_len, b.coverage
            );
            let _ = writeln!(
                out,
                "unmatched target plan nodes: {} of {}",
                alignment.unmatched_target.len(),
                alignment.target_node_count()
            );
        } else {
            let _ = writeln!(out, "score: pending human evaluation");
        }
        let tail = &recent[recent.len().saturating_sub(OBSERVED_STEPS)..];
        if tail.is_empty() {
            let _ = writeln!(out, "recent steps: none");
        } else {
            let _ = writeln!(out, "recent steps:");
            for s in tail {
                let _ = writeln!(out, "- tool {} -> revision {} delta {:+.2}", s.tool_id, s.revision, s.delta);
            }
        }
        let _ = writeln!(out, "library: {}", library_digest.trim());
        Ok(out)
    }

    pub fn oracle(&self) -> EnvOracle<'_> {
        EnvOracle { env: self }
    }
}

/// Lets the sandbox judge test outcomes against this problem.
pub struct EnvOracle<'a> {
    env: &'a ProblemEnv,
}

impl StateOracle for EnvOracle<'_> {
    fn empty_state(&self) -> Value {
        self.env.reset().to_wire()
    }

    fn validate_state(&self, _input: &Value, output: &Value) -> Result<(), String> {
        DocumentState::from_wire(output).map(|_| ()).map_err(|e| e.to_string())
    }

    fn score_delta(&self, before: &Value, after: &Value) -> Option<f64> {
        let before = DocumentState::from_wire(before).ok()?;
        let after = DocumentState::from_wire(after).ok()?;
        let b = self.env.score(&before).ok()??;
        let a = self.env.score(&after).ok()??;
        Some(a.total - b.total)
    }
}

/// Schema-only oracle for problems without a measurable target.
pub struct SchemaOracle {
    pub title: String,
}

impl StateOracle for SchemaOracle {
    fn empty_state(&self) -> Value {
        DocumentState {
            title: self.title.clone(),
            abstract_text: String::new(),
            plan: PlanNode::root(self.title.clone()),
            sections: vec![],
            references: vec![],
            revision: 0,
            last_breakdown: None,
        }
        .to_wire()
    }

    fn validate_state(&self, _input: &Value, output: &Value) -> Result<(), String> {
        DocumentState::from_wire(output).map(|_| ()).map_err(|e| e.to_string())
    }

    fn score_delta(&self, _before: &Value, _after: &Value) -> Option<f64> {
        None
    }
}

/// One-line account of a validation report.
pub fn report_summary(report: &ExecutionReport) -> String {
    if report.passed() {
        format!("{} tests passed", report.tests.len())
    } else {
        report.diagnostics_text()
    }
}

