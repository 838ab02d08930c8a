//! The learning loop: Coach, Coder, Critic, then retry or capitalize.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::config::{SessionClock, SessionConfig, SessionMode};
use super::events::{EventKind, EventLog, SessionEvent};
use super::state::*;
use super::OrchestratorError;
use crate::agents::{
    capitalization_draft, capitalizer_prompt, coach_prompt, coder_prompt, critic_decide, critic_prompt,
    generate_candidates, parse_code, parse_tool_spec, parse_verdict, repair_prompt, select_feedback, AgentKind,
    AgentSpec, AutomationType, Candidate, ChatBackend, FeedbackItem, FeedbackKind, FeedbackSource, Polarity,
    PromptBundle, SelectionStrategy, Verdict,
};
use crate::embedding::Embedder;
use crate::env::{DocumentState, ProblemEnv, ProblemInstance, StepResult};
use crate::hitl::{
    estimate_benefit, evaluate_triggers, select_interventions, HitlEvent, HookPlan, HumanChannel, HumanLlm,
    InterventionCandidate, Phase, ScriptedHuman, StepOutcome, StepRequest, TriggerContext,
};
use crate::library::{Novelty, Provenance, StatusFilter, ToolMetrics, ToolRecord, ToolSpec, ToolStatus};
use crate::sandbox::{Assertion, ExecutionReport, Sandbox, SyntaxResult, TestCase, TestOrigin, TestOutcome, TestSuite, ToolCode};

/// Backends and the human channel a session runs against.
#[derive(Clone, Default)]
pub struct Runtime {
    pub backends: HashMap<String, Arc<dyn ChatBackend>>,
    pub channel: Option<Arc<dyn HumanChannel>>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut ids: Vec<&String> = self.backends.keys().collect();
        ids.sort();
        f.debug_struct("Runtime")
            .field("backends", &ids)
            .field("channel", &self.channel.is_some())
            .finish()
    }
}

impl Runtime {
    /// Backends from the config and, when present, its scripted human file.
    pub fn from_config(config: &SessionConfig) -> Self {
        Self {
            backends: config.backends.iter().map(|(k, b)| (k.clone(), b.build())).collect(),
            channel: config
                .human
                .clone()
                .map(|h| Arc::new(ScriptedHuman::new(h)) as Arc<dyn HumanChannel>),
        }
    }

    pub fn with_channel(mut self, channel: Arc<dyn HumanChannel>) -> Self {
        self.channel = Some(channel);
        self
    }
}

/// The event log together with the state folded from it.
struct Journal {
    log: EventLog,
    state: SessionState,
}

impl Journal {
    fn emit(&mut self, kind: EventKind, payload: Value, timing: Value) -> Result<(), OrchestratorError> {
        let event = self.log.append(kind, payload, timing);
        self.state.apply(&event)
    }
}

/// Outcome of validating one piece of Coder output.
#[derive(Debug, Clone)]
struct Validation {
    code: Option<ToolCode>,
    tests: TestSuite,
    report: ExecutionReport,
    delta: Option<f64>,
    trials: Vec<Option<(DocumentState, StepResult)>>,
}

impl Validation {
    fn passed(&self) -> bool {
        self.code.is_some() && self.report.passed()
    }

    fn rank_score(&self) -> f64 {
        if self.passed() {
            1000.0 + self.delta.unwrap_or(0.0)
        } else {
            -(self.report.failed_count().min(1000) as f64)
        }
    }

    fn summary(&self, index: usize) -> CandidateValidation {
        CandidateValidation {
            index,
            parsed: self.code.is_some(),
            passed: self.passed(),
            delta: self.delta,
            rank_score: self.rank_score(),
            report: self.report.clone(),
        }
    }
}

fn refused(reason: &str) -> ExecutionReport {
    ExecutionReport {
        syntax: SyntaxResult::Fail(vec![]),
        tests: vec![],
        breaches: vec![],
        fix_attempts: 0,
        rejected: Some(reason.to_owned()),
        timings: Default::default(),
    }
}

/// Runs code against the smoke test and a trial step on every problem.
struct Validator<'a> {
    envs: &'a [ProblemEnv],
    sandbox: &'a Sandbox,
    states: Vec<DocumentState>,
    tool_name: String,
    cache: Mutex<HashMap<String, Validation>>,
}

impl Validator<'_> {
    fn validate_code(&self, code: &ToolCode) -> Result<Validation, OrchestratorError> {
        let smoke = match self.sandbox.auto_generate_tests(code) {
            Ok(t) => t,
            Err(e) => {
                return Ok(Validation {
                    code: Some(code.clone()),
                    tests: TestSuite {
                        cases: vec![],
                        origin: TestOrigin::AutoGenerated,
                    },
                    report: refused(&e.to_string()),
                    delta: None,
                    trials: vec![None; self.envs.len()],
                })
            }
        };
        let mut report = self.sandbox.run_tests(code, &smoke, &self.envs[0].oracle())?;
        let mut tests = smoke;
        let mut trials = vec![None; self.envs.len()];
        if report.syntax.passed() {
            let args = json!({});
            let results: Vec<_> = thread::scope(|s| {
                let handles: Vec<_> = self
                    .envs
                    .iter()
                    .zip(&self.states)
                    .map(|(env, state)| {
                        let args = &args;
                        s.spawn(move || env.apply_tool(state, &self.tool_name, code, args, self.sandbox))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("trial thread")).collect()
            });
            for (i, result) in results.into_iter().enumerate() {
                let name = format!("trial_{}", self.envs[i].id());
                tests.cases.push(TestCase {
                    name: name.clone(),
                    setup: Some(self.states[i].to_wire()),
                    args: args.clone(),
                    expected: Assertion::ReturnsValidState,
                });
                let mut outcome = TestOutcome {
                    name,
                    passed: false,
                    failure: None,
                    breach: None,
                    output: String::new(),
                    wall_ms: 0,
                };
                match result {
                    Ok((next, step)) => {
                        outcome.passed = true;
                        outcome.output = step.diagnostics.clone();
                        trials[i] = Some((next, step));
                    }
                    Err(e) => outcome.failure = Some(e.to_string()),
                }
                report.tests.push(outcome);
            }
        }
        let measured: Vec<f64> = trials
            .iter()
            .flatten()
            .filter(|(_, step)| step.score_after.is_some())
            .map(|(_, step)| step.delta)
            .collect();
        let delta = (!measured.is_empty()).then(|| measured.iter().sum::<f64>() / measured.len() as f64);
        Ok(Validation {
            code: Some(code.clone()),
            tests,
            report,
            delta,
            trials,
        })
    }

    fn validate_text(&self, text: &str) -> Result<Validation, OrchestratorError> {
        if let Some(v) = self.cache.lock().get(text) {
            return Ok(v.clone());
        }
        let v = match parse_code(text) {
            Some(code) => self.validate_code(&code)?,
            None => Validation {
                code: None,
                tests: TestSuite {
                    cases: vec![],
                    origin: TestOrigin::AutoGenerated,
                },
                report: refused("no code found in the answer"),
                delta: None,
                trials: vec![None; self.envs.len()],
            },
        };
        self.cache.lock().insert(text.to_owned(), v.clone());
        Ok(v)
    }

    /// Validates every candidate concurrently, reusing cached results.
    fn validate_all(&self, candidates: &[Candidate]) -> Result<Vec<Validation>, OrchestratorError> {
        let missing: Vec<&Candidate> = {
            let cache = self.cache.lock();
            let mut seen = std::collections::HashSet::new();
            candidates
                .iter()
                .filter(|c| !cache.contains_key(&c.text) && seen.insert(c.text.as_str()))
                .collect()
        };
        let fresh: Vec<(String, Result<Validation, OrchestratorError>)> = thread::scope(|s| {
            let handles: Vec<_> = missing
                .iter()
                .map(|c| {
                    let text = c.text.clone();
                    s.spawn(move || {
                        let v = match parse_code(&text) {
                            Some(code) => self.validate_code(&code),
                            None => Ok(Validation {
                                code: None,
                                tests: TestSuite {
                                    cases: vec![],
                                    origin: TestOrigin::AutoGenerated,
                                },
                                report: refused("no code found in the answer"),
                                delta: None,
                                trials: vec![None; self.envs.len()],
                            }),
                        };
                        (text, v)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("validation thread")).collect()
        });
        for (text, v) in fresh {
            self.cache.lock().insert(text, v?);
        }
        candidates.iter().map(|c| self.validate_text(&c.text)).collect()
    }
}

/// Error raised inside an iteration, tagged with the stage it came from.
struct StageError {
    stage: &'static str,
    error: OrchestratorError,
}

trait Stage<T> {
    fn at(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<OrchestratorError>> Stage<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, error: e.into() })
    }
}

enum Flow<T> {
    Continue(T),
    Restart,
}

pub struct Session {
    journal: Journal,
    envs: Vec<ProblemEnv>,
    runtime: Runtime,
    sandbox: Sandbox,
    embedder: Embedder,
    clock_start: Instant,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.journal.state.session_id)
            .field("iteration", &self.journal.state.iteration)
            .field("events", &self.journal.log.len())
            .finish()
    }
}

fn order_problems(config: &SessionConfig, problems: Vec<ProblemInstance>) -> Result<Vec<ProblemInstance>, OrchestratorError> {
    if config.problem_ids.is_empty() {
        if problems.is_empty() {
            return Err(OrchestratorError::InvalidConfig("a session needs at least one problem".into()));
        }
        return Ok(problems);
    }
    let mut by_id: HashMap<String, ProblemInstance> = problems.into_iter().map(|p| (p.id.clone(), p)).collect();
    config
        .problem_ids
        .iter()
        .map(|id| by_id.remove(id).ok_or_else(|| OrchestratorError::UnknownProblem(id.clone())))
        .collect()
}

fn check_runtime(config: &SessionConfig, runtime: &Runtime) -> Result<(), OrchestratorError> {
    for agent in config.agents.iter() {
        if !runtime.backends.contains_key(&agent.backend) {
            return Err(OrchestratorError::InvalidConfig(format!(
                "agent {} uses backend `{}`, which is not configured",
                agent.kind, agent.backend
            )));
        }
    }
    if config.mode != SessionMode::Auto && runtime.channel.is_none() {
        return Err(OrchestratorError::InvalidConfig("human-guided modes need a human channel".into()));
    }
    Ok(())
}

impl Session {
    /// Validates the configuration, logs `session-started` and seeds primitives.
    pub fn start(config: SessionConfig, problems: Vec<ProblemInstance>, runtime: Runtime) -> Result<Self, OrchestratorError> {
        config.validate()?;
        check_runtime(&config, &runtime)?;
        let problems = order_problems(&config, problems)?;
        let embedder = config.embedding.build();
        let envs: Vec<ProblemEnv> = problems
            .into_iter()
            .map(|mut p| {
                p.score = config.score;
                ProblemEnv::new(p, embedder.clone())
            })
            .collect();
        let mut states = Vec::with_capacity(envs.len());
        for env in &envs {
            let mut s = env.reset();
            s.last_breakdown = env.score(&s)?;
            states.push(s);
        }
        let session_id = config.resolved_session_id();
        let started = SessionStarted {
            session_id: session_id.clone(),
            config: config.clone(),
            problems: envs
                .iter()
                .map(|e| ProblemRef {
                    id: e.id().to_owned(),
                    title: e.problem.title.clone(),
                    measurable: e.problem.target.is_some(),
                })
                .collect(),
            states,
        };
        let sandbox = Sandbox::new(config.limits, config.allowed_libraries.clone());
        let mut session = Self {
            journal: Journal {
                log: EventLog::new(),
                state: SessionState::new(embedder.clone()),
            },
            envs,
            runtime,
            sandbox,
            embedder,
            clock_start: Instant::now(),
        };
        session.journal.emit(EventKind::SessionStarted, to_payload(&started), Value::Null)?;
        session.seed_primitives()?;
        Ok(session)
    }

    /// Continues a logged session. An iteration cut off mid-way is closed as failed.
    pub fn resume(events: Vec<SessionEvent>, problems: Vec<ProblemInstance>, runtime: Runtime) -> Result<Self, OrchestratorError> {
        let state = replay_state(&events)?;
        if !state.is_started() {
            return Err(OrchestratorError::CorruptLog {
                seq: 0,
                reason: "empty log".into(),
            });
        }
        let config = state.config.clone();
        check_runtime(&config, &runtime)?;
        let wanted: Vec<String> = state.problems.iter().map(|p| p.id.clone()).collect();
        let ordered = order_problems(
            &SessionConfig {
                problem_ids: wanted,
                ..SessionConfig::default()
            },
            problems,
        )?;
        let embedder = config.embedding.build();
        let envs = ordered
            .into_iter()
            .map(|mut p| {
                p.score = config.score;
                ProblemEnv::new(p, embedder.clone())
            })
            .collect();
        let mut session = Self {
            journal: Journal {
                log: EventLog::from_events(events),
                state,
            },
            envs,
            runtime,
            sandbox: Sandbox::new(config.limits, config.allowed_libraries.clone()),
            embedder,
            clock_start: Instant::now(),
        };
        if session.journal.state.open_iteration {
            let iteration = session.journal.state.iteration;
            session.journal.emit(
                EventKind::IterationFailed,
                to_payload(&IterationFailed {
                    iteration,
                    stage: "resume".into(),
                    error: "iteration interrupted before completion".into(),
                }),
                Value::Null,
            )?;
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.journal.state.session_id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.journal.state.config
    }

    pub fn state(&self) -> &SessionState {
        &self.journal.state
    }

    /// Shared handle on the log, for readers on other threads.
    pub fn log(&self) -> EventLog {
        self.journal.log.clone()
    }

    pub fn events(&self) -> Vec<SessionEvent> {
        self.journal.log.snapshot()
    }

    pub fn summary(&self) -> SessionSummary {
        self.journal.state.summary()
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        self.journal.state.snapshot()
    }

    pub fn problems(&self) -> &[ProblemEnv] {
        &self.envs
    }

    /// Seconds on the session clock.
    pub fn elapsed(&self) -> f64 {
        match self.config().clock {
            SessionClock::Wall => self.clock_start.elapsed().as_secs_f64(),
            SessionClock::Logical { iteration_seconds } => {
                self.journal.state.iteration as f64 * iteration_seconds + self.journal.state.human_seconds()
            }
        }
    }

    fn seed_primitives(&mut self) -> Result<(), OrchestratorError> {
        let primitives = self.config().primitives.clone();
        for p in primitives {
            let code = ToolCode::python(p.source.clone());
            let tests = self.sandbox.auto_generate_tests(&code)?;
            let report = self.sandbox.run_tests(&code, &tests, &self.envs[0].oracle())?;
            if !report.passed() {
                return Err(OrchestratorError::InvalidConfig(format!(
                    "primitive `{}` fails its smoke test: {}",
                    p.name,
                    report.diagnostics_text()
                )));
            }
            let draft = ToolRecord {
                id: String::new(),
                name: p.name.clone(),
                description: p.description.clone(),
                usage: p.usage.clone(),
                spec: ToolSpec {
                    name: p.name.clone(),
                    purpose: p.description.clone(),
                    input_contract: "document state".into(),
                    output_contract: "document state".into(),
                    test_plan: vec![],
                    novelty: Novelty::New,
                },
                code,
                tests,
                last_report: report,
                status: ToolStatus::Validated,
                metrics: ToolMetrics::default(),
                description_embedding: None,
                provenance: Provenance {
                    session_id: self.id().to_owned(),
                    seeded: true,
                    ..Provenance::default()
                },
            };
            let record = self.journal.state.library.prepare(draft)?;
            self.journal
                .emit(EventKind::ToolSeeded, to_payload(&ToolEvent { iteration: None, record }), Value::Null)?;
        }
        Ok(())
    }

    fn automatic(&self) -> bool {
        match self.config().mode {
            SessionMode::Auto => true,
            SessionMode::Hitl => false,
            SessionMode::Hybrid { switch_after_s } => switch_after_s <= 0.0 || self.journal.state.switched_to_auto,
        }
    }

    /// Automation level in effect for an agent in a guided session. When the
    /// configuration leaves every agent automatic, guided modes let the
    /// planner decide for all of them.
    fn automation(&self, kind: AgentKind) -> AutomationType {
        let agents = &self.config().agents;
        if agents.iter().all(|a| a.automation == AutomationType::Automatic) {
            AutomationType::PartialHuman
        } else {
            agents.get(kind).automation
        }
    }

    fn plan_hooks(&mut self, iteration: u64) -> Result<BTreeMap<AgentKind, HookPlan>, OrchestratorError> {
        let mut hooks: BTreeMap<AgentKind, HookPlan> = AgentKind::ALL.into_iter().map(|k| (k, HookPlan::NONE)).collect();
        if self.automatic() {
            return Ok(hooks);
        }
        let mut slots = Vec::new();
        for kind in AgentKind::ALL {
            match self.automation(kind) {
                AutomationType::Automatic => {}
                AutomationType::FullHuman => {
                    hooks.insert(kind, HookPlan::BOTH);
                }
                AutomationType::PartialHuman => {
                    slots.push((kind, Phase::PreInference));
                    slots.push((kind, Phase::PostInference));
                }
            }
        }
        if slots.is_empty() {
            return Ok(hooks);
        }
        let config = self.config().clone();
        let state = &self.journal.state;
        let ctx = TriggerContext {
            iteration,
            consecutive_retries: state.consecutive_retries,
            best_scores: state.best_history.clone(),
        };
        let triggered = evaluate_triggers(&ctx, &config.triggers, &slots);
        let costs = &config.interventions;
        let candidates: Vec<InterventionCandidate> = slots
            .iter()
            .zip(triggered)
            .enumerate()
            .map(|(index, (&(agent, phase), triggered))| InterventionCandidate {
                index,
                agent,
                phase,
                benefit: estimate_benefit(&state.history, phase, agent, costs.benefit_prior),
                time_cost: match phase {
                    Phase::PreInference => costs.pre_seconds,
                    Phase::PostInference => costs.post_seconds,
                },
                triggered,
                reliability_after: costs.reliability_after,
            })
            .collect();
        let mut agents: Vec<AgentSpec> = Vec::new();
        for kind in AgentKind::ALL {
            if slots.iter().any(|(k, _)| *k == kind) {
                let mut spec = config.agents.get(kind).clone();
                spec.reliability = state.reliability.get(&kind).map_or(spec.reliability, |t| t.value());
                agents.push(spec);
            }
        }
        let budget = (config.time_budget_s - state.human_seconds()).max(0.0);
        let plan = select_interventions(&candidates, budget, &agents)?;
        for &i in &plan.selected {
            let c = &candidates[i];
            let h = hooks.entry(c.agent).or_default();
            match c.phase {
                Phase::PreInference => h.pre = true,
                Phase::PostInference => h.post = true,
            }
        }
        self.journal.emit(
            EventKind::InterventionPlanned,
            to_payload(&InterventionPlanned {
                iteration,
                budget_s: budget,
                candidates,
                plan,
            }),
            Value::Null,
        )?;
        Ok(hooks)
    }

    fn feedback_for(&self, kind: AgentKind) -> Result<Vec<FeedbackItem>, OrchestratorError> {
        let agent = self.config().agents.get(kind);
        let mut pool = self.journal.state.pools.get(&kind).cloned().unwrap_or_default();
        if agent.feedback_policy.strategy == SelectionStrategy::Diversity {
            for item in pool.iter_mut().filter(|f| f.embedding.is_none()) {
                item.embedding = Some(self.embedder.embed_text(&item.text).map_err(crate::agents::AgentError::from)?);
            }
        }
        let mut selected = select_feedback(&pool, agent.feedback_policy, agent.feedback_budget);
        for item in &mut selected {
            item.embedding = None;
        }
        Ok(selected)
    }

    fn prompt_limit(&self, kind: AgentKind) -> Option<usize> {
        let agent = self.config().agents.get(kind);
        self.runtime.backends.get(&agent.backend).and_then(|b| b.max_prompt_tokens())
    }

    fn log_prompt(&mut self, iteration: u64, agent: AgentKind, purpose: &str, prompt: &PromptBundle) -> Result<(), OrchestratorError> {
        self.journal.emit(
            EventKind::PromptBuilt,
            to_payload(&PromptBuilt {
                iteration,
                agent,
                purpose: purpose.into(),
                prompt: prompt.clone(),
            }),
            Value::Null,
        )
    }

    fn log_candidates(&mut self, iteration: u64, agent: AgentKind, step: u64, purpose: &str, candidates: &[Candidate]) -> Result<(), OrchestratorError> {
        emit_candidates(&mut self.journal, iteration, agent, step, purpose, candidates)
    }

    /// One agent step through the human-steered wrapper, with every
    /// sub-event logged as it happens.
    fn agent_step(
        &mut self,
        iteration: u64,
        kind: AgentKind,
        purpose: &str,
        prompt: PromptBundle,
        hooks: HookPlan,
        annotate: &mut dyn FnMut(&[Candidate]) -> Vec<Value>,
    ) -> Result<StepOutcome, OrchestratorError> {
        self.log_prompt(iteration, kind, purpose, &prompt)?;
        let agent = self.config().agents.get(kind).clone();
        let session_id = self.id().to_owned();
        let deadline = self.config().deadline_policy();
        let Session { journal, runtime, .. } = self;
        let llm = HumanLlm {
            backends: &runtime.backends,
            channel: runtime.channel.as_deref(),
        };
        let mut counter = journal.state.next_step.get(&kind).copied().unwrap_or(0);
        let mut fault: Option<OrchestratorError> = None;
        let purpose = purpose.to_owned();
        let mut observer = |event: HitlEvent<'_>| {
            if fault.is_some() {
                return;
            }
            let result = match event {
                HitlEvent::PromptRebuilt(p) => journal.emit(
                    EventKind::PromptBuilt,
                    to_payload(&PromptBuilt {
                        iteration,
                        agent: kind,
                        purpose: format!("{purpose}-guided"),
                        prompt: p.clone(),
                    }),
                    Value::Null,
                ),
                HitlEvent::Generated { step, candidates } => emit_candidates(journal, iteration, kind, step, &purpose, candidates),
                HitlEvent::Requested(request) => journal.emit(
                    EventKind::GuidanceRequested,
                    to_payload(&GuidanceRequested {
                        iteration,
                        request: request.clone(),
                    }),
                    Value::Null,
                ),
                HitlEvent::Resolved { decision, feedback } => {
                    let (step, phase) = parse_request_id(&decision.request_id);
                    let mut r = journal.emit(
                        EventKind::GuidanceResolved,
                        to_payload(&GuidanceResolved {
                            iteration,
                            agent: kind,
                            step,
                            phase: phase.unwrap_or_else(|| decision.action.phase()),
                            decision: decision.clone(),
                        }),
                        json!({ "human_seconds": decision.human_seconds }),
                    );
                    for item in feedback {
                        if r.is_ok() {
                            r = journal.emit(
                                EventKind::FeedbackRecorded,
                                to_payload(&FeedbackRecorded {
                                    agent: kind,
                                    item: item.clone(),
                                }),
                                Value::Null,
                            );
                        }
                    }
                    r
                }
            };
            if let Err(e) = result {
                fault = Some(e);
            }
        };
        let outcome = llm.run_step(
            StepRequest {
                session_id: &session_id,
                agent: &agent,
                prompt,
                iteration,
                hooks,
                deadline,
            },
            &mut || {
                counter += 1;
                counter - 1
            },
            annotate,
            &mut observer,
        );
        if let Some(e) = fault {
            return Err(e);
        }
        Ok(outcome?)
    }

    /// Runs one Coach, Coder, Critic cycle and capitalizes the result.
    pub fn run_iteration(&mut self) -> Result<Vec<SessionEvent>, OrchestratorError> {
        if self.journal.state.is_ended() {
            return Err(OrchestratorError::SessionEnded);
        }
        let iteration = self.journal.state.iteration;
        if iteration >= self.config().iteration_budget {
            return Err(OrchestratorError::BudgetExhausted);
        }
        let first = self.journal.log.len() as u64;
        let elapsed = self.elapsed();
        if let SessionMode::Hybrid { switch_after_s } = self.config().mode {
            if switch_after_s > 0.0 && !self.journal.state.switched_to_auto && elapsed >= switch_after_s {
                self.journal.emit(
                    EventKind::ModeSwitched,
                    to_payload(&ModeSwitched { iteration }),
                    json!({ "elapsed_s": elapsed }),
                )?;
            }
        }
        let automatic = self.automatic();
        self.journal.emit(
            EventKind::IterationStarted,
            to_payload(&IterationStarted { iteration, automatic }),
            json!({ "elapsed_s": elapsed }),
        )?;
        if let Err(StageError { stage, error }) = self.iteration_body(iteration) {
            // A fault while logging leaves the journal unusable; surface it.
            if matches!(error, OrchestratorError::CorruptLog { .. }) {
                return Err(error);
            }
            tracing::warn!(iteration, stage, %error, "iteration failed");
            self.journal.emit(
                EventKind::IterationFailed,
                to_payload(&IterationFailed {
                    iteration,
                    stage: stage.into(),
                    error: error.to_string(),
                }),
                Value::Null,
            )?;
        }
        Ok(self.journal.log.since(first))
    }

    fn observation(&self, digest_head: &str) -> Result<String, OrchestratorError> {
        let state = &self.journal.state;
        let mut parts = Vec::with_capacity(self.envs.len());
        for (i, env) in self.envs.iter().enumerate() {
            parts.push(env.observe(&state.states[i], &state.recent[i], digest_head)?);
        }
        Ok(parts.join("\n"))
    }

    fn iteration_body(&mut self, iteration: u64) -> Result<(), StageError> {
        let hooks = self.plan_hooks(iteration).at("planning")?;
        let digest = self.journal.state.library.library_digest(5);
        let digest_head = digest.lines().next().unwrap_or_default().to_owned();
        let observation = self.observation(&digest_head).at("observation")?;
        let mut reliability: Vec<(AgentKind, bool)> = Vec::new();
        let mut outcomes: Vec<StepOutcome> = Vec::new();

        // Coach
        let spec = match self.coach(iteration, &observation, &digest, hooks[&AgentKind::Coach], &mut outcomes)? {
            Flow::Continue(spec) => spec,
            Flow::Restart => return self.finish_restarted(iteration, reliability, &outcomes),
        };
        reliability.push((AgentKind::Coach, true));

        // Coder and Critic, with retries
        let retry_budget = self.config().retry_budget;
        let mut instructions: Option<String> = None;
        let mut human_edited = false;
        let mut attempt = 0;
        let (validation, verdict) = loop {
            let flow = self
                .code_attempt(iteration, attempt, &spec, &observation, instructions.as_deref(), hooks[&AgentKind::Coder], &mut outcomes)?;
            let (validation, edited, first_pass) = match flow {
                Flow::Continue(v) => v,
                Flow::Restart => return self.finish_restarted(iteration, reliability, &outcomes),
            };
            human_edited |= edited;
            reliability.push((AgentKind::Coder, first_pass));
            let remaining = retry_budget - attempt;
            let (verdict, agreed) =
                match self.critique(iteration, attempt, &spec, &validation, remaining, hooks[&AgentKind::Critic], &mut outcomes)? {
                    Flow::Continue(v) => v,
                    Flow::Restart => return self.finish_restarted(iteration, reliability, &outcomes),
                };
            reliability.push((AgentKind::Critic, agreed));
            match verdict {
                Verdict::Retry { instructions: text } => {
                    instructions = Some(text);
                    attempt += 1;
                }
                v => break (validation, v),
            }
        };

        // Capitalizer
        let code = validation.code.clone().unwrap_or_else(|| ToolCode::python(""));
        let provenance = Provenance {
            session_id: self.id().to_owned(),
            iteration,
            human_edited,
            seeded: false,
            retries_used: attempt,
            retry_budget_exhausted: matches!(verdict, Verdict::TooHard { .. }),
        };
        let (answer, capitalized) =
            self.capitalize(iteration, &spec, &code, &validation.report, &verdict, hooks[&AgentKind::Capitalizer], &mut outcomes);
        reliability.push((AgentKind::Capitalizer, capitalized));
        let draft = capitalization_draft(
            &spec,
            &code,
            &validation.tests,
            &validation.report,
            &verdict,
            ToolMetrics::default(),
            provenance,
            &answer,
        );
        let record = self.journal.state.library.prepare(draft).at("capitalizer")?;
        let tool_id = record.id.clone();
        self.journal
            .emit(
                EventKind::ToolArchived,
                to_payload(&ToolEvent {
                    iteration: Some(iteration),
                    record,
                }),
                Value::Null,
            )
            .at("capitalizer")?;

        let accepted = matches!(verdict, Verdict::Accept);
        let before = self.journal.state.mean_best();
        if accepted {
            for (problem, trial) in validation.trials.iter().enumerate() {
                let Some((state, step)) = trial.clone() else { continue };
                let step = StepResult {
                    tool_id: tool_id.clone(),
                    ..step
                };
                let breakdown = state.last_breakdown;
                self.journal
                    .emit(
                        EventKind::StateStepped,
                        to_payload(&StateStepped {
                            iteration,
                            problem,
                            state,
                            step,
                        }),
                        Value::Null,
                    )
                    .at("commit")?;
                self.journal
                    .emit(
                        EventKind::ScoreComputed,
                        to_payload(&ScoreComputed {
                            iteration,
                            problem,
                            problem_id: self.envs[problem].id().to_owned(),
                            breakdown,
                        }),
                        Value::Null,
                    )
                    .at("commit")?;
            }
        }
        let after = self.journal.state.mean_best();
        self.macro_feedback(iteration, &spec, &verdict, validation.delta, before, after).at("feedback")?;
        let interventions = interventions(&outcomes);
        self.journal
            .emit(
                EventKind::IterationFinished,
                to_payload(&IterationFinished {
                    iteration,
                    outcome: if accepted { IterationOutcome::Accepted } else { IterationOutcome::TooHard },
                    tool_id: Some(tool_id),
                    retries: attempt,
                    reliability,
                    interventions,
                }),
                Value::Null,
            )
            .at("finish")
    }

    fn finish_restarted(&mut self, iteration: u64, reliability: Vec<(AgentKind, bool)>, outcomes: &[StepOutcome]) -> Result<(), StageError> {
        self.journal
            .emit(
                EventKind::IterationFinished,
                to_payload(&IterationFinished {
                    iteration,
                    outcome: IterationOutcome::Restarted,
                    tool_id: None,
                    retries: 0,
                    reliability,
                    interventions: interventions(outcomes),
                }),
                Value::Null,
            )
            .at("finish")
    }

    fn coach(
        &mut self,
        iteration: u64,
        observation: &str,
        digest: &str,
        hooks: HookPlan,
        outcomes: &mut Vec<StepOutcome>,
    ) -> Result<Flow<ToolSpec>, StageError> {
        let agent = self.config().agents.coach.clone();
        let feedback = self.feedback_for(AgentKind::Coach).at("coach")?;
        let prompt = coach_prompt(&agent, observation, digest, &[], &feedback, self.prompt_limit(AgentKind::Coach)).at("coach")?;
        let mut annotate = |cands: &[Candidate]| -> Vec<Value> {
            cands
                .iter()
                .map(|c| match parse_tool_spec(&c.text) {
                    Ok(_) => json!({ "parsed": true, "rank_score": 1.0 }),
                    Err(e) => json!({ "parsed": false, "error": e, "rank_score": 0.0 }),
                })
                .collect()
        };
        let outcome = self.agent_step(iteration, AgentKind::Coach, "coach", prompt, hooks, &mut annotate).at("coach")?;
        let restart = outcome.restart;
        let order: Vec<&Candidate> = outcome
            .chosen
            .and_then(|i| outcome.candidates.get(i))
            .into_iter()
            .chain(outcome.eligible())
            .collect();
        let mut errors = Vec::new();
        let mut spec = None;
        for c in order {
            match parse_tool_spec(&c.text) {
                Ok(s) => {
                    spec = Some(s);
                    break;
                }
                Err(e) => errors.push(format!("candidate {}: {e}", c.index)),
            }
        }
        outcomes.push(outcome);
        if restart {
            return Ok(Flow::Restart);
        }
        spec.map(Flow::Continue)
            .ok_or_else(|| crate::agents::AgentError::AllCandidatesUnparseable(errors.join("; ")))
            .at("coach")
    }

    #[allow(clippy::too_many_arguments)]
    fn code_attempt(
        &mut self,
        iteration: u64,
        attempt: u32,
        spec: &ToolSpec,
        observation: &str,
        instructions: Option<&str>,
        hooks: HookPlan,
        outcomes: &mut Vec<StepOutcome>,
    ) -> Result<Flow<(Validation, bool, bool)>, StageError> {
        let agent = self.config().agents.coder.clone();
        let feedback = self.feedback_for(AgentKind::Coder).at("coder")?;
        let examples = self.examples(spec).at("coder")?;
        let limit = self.prompt_limit(AgentKind::Coder);
        let prompt = coder_prompt(&agent, spec, observation, instructions, &examples, &feedback, limit).at("coder")?;
        let states = self.journal.state.states.clone();
        let envs = std::mem::take(&mut self.envs);
        let sandbox = self.sandbox.clone();
        let validator = Validator {
            envs: &envs,
            sandbox: &sandbox,
            states,
            tool_name: spec.name.clone(),
            cache: Mutex::new(HashMap::new()),
        };
        let result = self.code_attempt_inner(iteration, attempt, spec, prompt, hooks, &validator, outcomes);
        drop(validator);
        self.envs = envs;
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn code_attempt_inner(
        &mut self,
        iteration: u64,
        attempt: u32,
        spec: &ToolSpec,
        prompt: PromptBundle,
        hooks: HookPlan,
        validator: &Validator<'_>,
        outcomes: &mut Vec<StepOutcome>,
    ) -> Result<Flow<(Validation, bool, bool)>, StageError> {
        let mut annotate_error = None;
        let mut annotate = |cands: &[Candidate]| -> Vec<Value> {
            match validator.validate_all(cands) {
                Ok(vs) => vs
                    .iter()
                    .zip(cands)
                    .map(|(v, c)| to_payload(&v.summary(c.index)))
                    .collect(),
                Err(e) => {
                    annotate_error = Some(e);
                    vec![json!({ "rank_score": 0.0 }); cands.len()]
                }
            }
        };
        let outcome = self.agent_step(iteration, AgentKind::Coder, "coder", prompt, hooks, &mut annotate).at("coder")?;
        if let Some(e) = annotate_error {
            return Err(e).at("validation");
        }
        if outcome.restart {
            outcomes.push(outcome);
            return Ok(Flow::Restart);
        }
        let validations = validator.validate_all(&outcome.candidates).at("validation")?;
        let human_chosen = outcome.chosen.is_some();
        let chosen = match outcome.chosen {
            Some(i) => i,
            None => {
                let mut best: Option<usize> = None;
                for c in outcome.eligible() {
                    let v = &validations[c.index];
                    let better = match best {
                        None => true,
                        Some(b) => {
                            let w = &validations[b];
                            (v.passed(), v.delta.unwrap_or(f64::NEG_INFINITY)) > (w.passed(), w.delta.unwrap_or(f64::NEG_INFINITY))
                        }
                    };
                    if better {
                        best = Some(c.index);
                    }
                }
                best.unwrap_or(0)
            }
        };
        let edited = outcome.candidates[chosen].human;
        let first_pass = validations[chosen].passed();
        let mut current = validations[chosen].clone();

        // Autofix rounds on the chosen code.
        let max_autofix = self.config().max_autofix;
        let mut fixes = 0;
        while !current.passed() && fixes < max_autofix {
            let Some(code) = current.code.clone() else { break };
            fixes += 1;
            let mut agent = self.config().agents.coder.clone();
            agent.candidates = 1;
            let prompt = repair_prompt(&agent, spec, &code, &current.report, self.prompt_limit(AgentKind::Coder)).at("autofix")?;
            self.log_prompt(iteration, AgentKind::Coder, "repair", &prompt).at("autofix")?;
            let step = self.journal.state.next_step.get(&AgentKind::Coder).copied().unwrap_or(0);
            let backend = self
                .runtime
                .backends
                .get(&agent.backend)
                .cloned()
                .ok_or_else(|| OrchestratorError::InvalidConfig(format!("backend `{}` missing", agent.backend)))
                .at("autofix")?;
            let candidates = generate_candidates(&agent, &prompt, backend.as_ref(), step).at("autofix")?;
            self.log_candidates(iteration, AgentKind::Coder, step, "repair", &candidates).at("autofix")?;
            let repaired = parse_code(&candidates[0].text).unwrap_or(code);
            let mut next = validator.validate_code(&repaired).at("autofix")?;
            next.report.fix_attempts = fixes;
            self.journal
                .emit(
                    EventKind::AutofixAttempt,
                    to_payload(&AutofixAttempt {
                        iteration,
                        attempt,
                        fix: fixes,
                        report: next.report.clone(),
                    }),
                    Value::Null,
                )
                .at("autofix")?;
            current = next;
        }

        let summaries = validations
            .iter()
            .zip(&outcome.candidates)
            .map(|(v, c)| v.summary(c.index))
            .collect();
        self.journal
            .emit(
                EventKind::CodeValidated,
                to_payload(&CodeValidated {
                    iteration,
                    attempt,
                    candidates: summaries,
                    chosen,
                    human_chosen,
                    final_report: current.report.clone(),
                    final_delta: current.delta,
                }),
                Value::Null,
            )
            .at("validation")?;
        outcomes.push(outcome);
        Ok(Flow::Continue((current, edited, first_pass)))
    }

    #[allow(clippy::too_many_arguments)]
    fn critique(
        &mut self,
        iteration: u64,
        attempt: u32,
        spec: &ToolSpec,
        validation: &Validation,
        remaining: u32,
        hooks: HookPlan,
        outcomes: &mut Vec<StepOutcome>,
    ) -> Result<Flow<(Verdict, bool)>, StageError> {
        let agent = self.config().agents.critic.clone();
        let feedback = self.feedback_for(AgentKind::Critic).at("critic")?;
        let code = validation.code.clone().unwrap_or_else(|| ToolCode::python(""));
        let prompt = critic_prompt(
            &agent,
            spec,
            &code,
            &validation.report,
            validation.delta,
            remaining,
            &feedback,
            self.prompt_limit(AgentKind::Critic),
        )
        .at("critic")?;
        let mut annotate = |cands: &[Candidate]| vec![json!({ "rank_score": 0.0 }); cands.len()];
        let outcome = self.agent_step(iteration, AgentKind::Critic, "critic", prompt, hooks, &mut annotate).at("critic")?;
        if outcome.restart {
            outcomes.push(outcome);
            return Ok(Flow::Restart);
        }
        let text = outcome
            .chosen
            .and_then(|i| outcome.candidates.get(i))
            .or_else(|| outcome.eligible().next())
            .or_else(|| outcome.candidates.first())
            .map(|c| c.text.clone())
            .unwrap_or_default();
        let (raw, instructions) = parse_verdict(&text);
        let verdict = critic_decide(&raw, &instructions, &validation.report, validation.delta, remaining);
        let gate_open = validation.passed() && validation.delta.map_or(true, |d| d >= 0.0);
        let agreed = (raw == "accept") == gate_open;
        self.journal
            .emit(
                EventKind::Verdict,
                to_payload(&VerdictEvent {
                    iteration,
                    attempt,
                    verdict: verdict.clone(),
                    raw,
                    retries_remaining: remaining,
                    delta: validation.delta,
                }),
                Value::Null,
            )
            .at("critic")?;
        outcomes.push(outcome);
        Ok(Flow::Continue((verdict, agreed)))
    }

    /// The Capitalizer's description. A failed step falls back to the spec
    /// purpose so that every verdict still ends in an archived tool.
    #[allow(clippy::too_many_arguments)]
    fn capitalize(
        &mut self,
        iteration: u64,
        spec: &ToolSpec,
        code: &ToolCode,
        report: &ExecutionReport,
        verdict: &Verdict,
        hooks: HookPlan,
        outcomes: &mut Vec<StepOutcome>,
    ) -> (String, bool) {
        let agent = self.config().agents.capitalizer.clone();
        let prompt = match capitalizer_prompt(&agent, spec, code, report, verdict, self.prompt_limit(AgentKind::Capitalizer)) {
            Ok(p) => p,
            Err(_) => return (String::new(), false),
        };
        let mut annotate = |cands: &[Candidate]| vec![json!({ "rank_score": 0.0 }); cands.len()];
        match self.agent_step(iteration, AgentKind::Capitalizer, "capitalizer", prompt, hooks, &mut annotate) {
            Ok(outcome) => {
                let text = outcome
                    .chosen
                    .and_then(|i| outcome.candidates.get(i))
                    .or_else(|| outcome.eligible().next())
                    .map(|c| c.text.clone())
                    .unwrap_or_default();
                outcomes.push(outcome);
                let ok = text.to_ascii_uppercase().contains("DESCRIPTION:");
                (text, ok)
            }
            Err(e) => {
                tracing::warn!(iteration, error = %e, "capitalizer failed, using the spec purpose");
                (String::new(), false)
            }
        }
    }

    fn examples(&self, spec: &ToolSpec) -> Result<Vec<String>, OrchestratorError> {
        let library = &self.journal.state.library;
        let hits = library.search_tools(&spec.purpose, 3, StatusFilter::Only(ToolStatus::Validated))?;
        Ok(hits
            .iter()
            .filter_map(|h| library.get(&h.id))
            .map(|t| format!("tool `{}`: {}\n```python\n{}\n```", t.name, t.description, t.code.source.trim_end()))
            .collect())
    }

    fn macro_feedback(
        &mut self,
        iteration: u64,
        spec: &ToolSpec,
        verdict: &Verdict,
        delta: Option<f64>,
        before: f64,
        after: f64,
    ) -> Result<(), OrchestratorError> {
        let outcome = match verdict {
            Verdict::Accept => "accepted",
            _ => "too_hard",
        };
        let measured = delta.map_or("not measurable".to_owned(), |d| format!("{d:+.2}"));
        let text = format!(
            "iteration {iteration}: tool `{}` {outcome}, trial delta {measured}, mean best score {after:.2} ({:+.2})",
            spec.name,
            after - before
        );
        let polarity = match verdict {
            Verdict::Accept if after > before => Polarity::Positive,
            Verdict::Accept => Polarity::Neutral,
            _ => Polarity::Negative,
        };
        for agent in [AgentKind::Coach, AgentKind::Coder, AgentKind::Critic] {
            let item = FeedbackItem {
                id: format!("macro-{iteration}-{agent}"),
                source: FeedbackSource::AutomaticMacro,
                kind: FeedbackKind::Quantitative,
                polarity,
                agent,
                text: text.clone(),
                created_at: iteration,
                embedding: None,
                pinned: false,
            };
            self.journal
                .emit(EventKind::FeedbackRecorded, to_payload(&FeedbackRecorded { agent, item }), Value::Null)?;
        }
        Ok(())
    }

    fn wall_exceeded(&self) -> bool {
        self.config().wall_budget_s.is_some_and(|w| self.elapsed() >= w)
    }

    /// Loops iterations until the iteration or wall budget runs out, then
    /// closes the log.
    pub fn run(&mut self) -> Result<SessionSummary, OrchestratorError> {
        let reason = loop {
            if self.journal.state.iteration >= self.config().iteration_budget {
                break "iteration-budget";
            }
            if self.wall_exceeded() {
                break "wall-budget";
            }
            self.run_iteration()?;
        };
        self.end(reason)?;
        Ok(self.summary())
    }

    pub fn end(&mut self, reason: &str) -> Result<(), OrchestratorError> {
        if self.journal.state.is_ended() {
            return Ok(());
        }
        self.journal
            .emit(EventKind::SessionEnded, to_payload(&SessionEnded { reason: reason.into() }), Value::Null)
    }
}

fn emit_candidates(
    journal: &mut Journal,
    iteration: u64,
    agent: AgentKind,
    step: u64,
    purpose: &str,
    candidates: &[Candidate],
) -> Result<(), OrchestratorError> {
    let latencies: Vec<u64> = candidates.iter().map(|c| c.latency_ms).collect();
    journal.emit(
        EventKind::CandidatesGenerated,
        to_payload(&CandidatesGenerated {
            iteration,
            agent,
            step,
            purpose: purpose.into(),
            candidates: candidates.to_vec(),
        }),
        json!({ "latency_ms": latencies }),
    )
}

/// Recovers (step, phase) from a `session:agent:step:phase` request id.
fn parse_request_id(id: &str) -> (u64, Option<Phase>) {
    let mut parts = id.rsplitn(3, ':');
    let phase = parts.next().and_then(|p| serde_json::from_value(Value::String(p.to_owned())).ok());
    let step = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    (step, phase)
}

fn interventions(outcomes: &[StepOutcome]) -> Vec<(AgentKind, Phase)> {
    let mut out = Vec::new();
    for o in outcomes {
        for d in o.decisions.iter().filter(|d| !d.automatic) {
            let agent = d
                .request_id
                .split(':')
                .rev()
                .nth(2)
                .and_then(|a| a.parse::<AgentKind>().ok());
            if let Some(agent) = agent {
                let key = (agent, d.action.phase());
                if !out.contains(&key) {
                    out.push(key);
                }
            }
        }
    }
    out
}

/// Starts a session, runs it to completion and returns its summary and log.
pub fn run_session(
    config: SessionConfig,
    problems: Vec<ProblemInstance>,
    runtime: Runtime,
) -> Result<(SessionSummary, Vec<SessionEvent>), OrchestratorError> {
    let mut session = Session::start(config, problems, runtime)?;
    let summary = session.run()?;
    Ok((summary, session.events()))
}
