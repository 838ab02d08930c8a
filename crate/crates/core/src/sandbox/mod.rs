//! Validation of generated tool code: syntax check, isolated test execution
//! under resource limits, smoke-test generation and the bounded repair loop.

mod process;
pub mod profile;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use profile::{default_allowed_libraries, LanguageProfile, NETWORK_BREACH_MARKER};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SandboxError {
    #[error("no language profile `{0}` configured")]
    ProfileMissing(String),
    #[error("sandbox unavailable: {0}")]
    SandboxUnavailable(String),
    #[error("no entrypoint detectable in tool source")]
    EntrypointUndetectable,
    #[error("repair backend failed: {0}")]
    BackendUnavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub wall_seconds: f64,
    pub memory_mb: u64,
    pub no_network: bool,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            wall_seconds: 20.0,
            memory_mb: 512,
            no_network: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCode {
    pub source: String,
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default = "default_entrypoint")]
    pub entrypoint: String,
    #[serde(default)]
    pub dependencies: Vec<String>,
}

fn default_profile() -> String {
    "python3".into()
}

fn default_entrypoint() -> String {
    "run".into()
}

impl ToolCode {
    pub fn python(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            profile: default_profile(),
            entrypoint: default_entrypoint(),
            dependencies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaSign {
    Positive,
    NonNegative,
    Zero,
    Negative,
}

impl DeltaSign {
    pub fn holds(self, delta: f64) -> bool {
        match self {
            DeltaSign::Positive => delta > 0.0,
            DeltaSign::NonNegative => delta >= 0.0,
            DeltaSign::Zero => delta == 0.0,
            DeltaSign::Negative => delta < 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Assertion {
    ReturnsValidState,
    OutputContains(String),
    ScoreDeltaSign(DeltaSign),
    CustomPredicate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub name: String,
    /// Input state; `None` means the empty revision-0 state.
    #[serde(default)]
    pub setup: Option<Value>,
    #[serde(default)]
    pub args: Value,
    pub expected: Assertion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestOrigin {
    Human,
    CoachSpec,
    AutoGenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub cases: Vec<TestCase>,
    pub origin: TestOrigin,
}

impl TestSuite {
    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

/// What the sandbox needs from the problem environment to judge test outcomes.
pub trait StateOracle: Sync {
    fn empty_state(&self) -> Value;
    fn validate_state(&self, input: &Value, output: &Value) -> Result<(), String>;
    /// Score change from `before` to `after`, when a target makes it measurable.
    fn score_delta(&self, before: &Value, after: &Value) -> Option<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Breach {
    WallTime,
    Memory,
    Network,
    DependencyNotAllowed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum InvocationStatus {
    Success { state: Value },
    ToolError { error_type: String, message: String },
    ProtocolError { message: String },
    Breach { breach: Breach },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub status: InvocationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<bool>,
    pub stderr: String,
    #[serde(skip)]
    pub wall_ms: u64,
}

impl Invocation {
    pub fn state(&self) -> Option<&Value> {
        match &self.status {
            InvocationStatus::Success { state } => Some(state),
            _ => None,
        }
    }

    pub fn failure_text(&self) -> Option<String> {
        match &self.status {
            InvocationStatus::Success { .. } => None,
            InvocationStatus::ToolError { error_type, message } => Some(format!("{error_type}: {message}")),
            InvocationStatus::ProtocolError { message } => Some(format!("protocol error: {message}")),
            InvocationStatus::Breach { breach } => Some(format!("limit breach: {breach:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "diagnostics", rename_all = "lowercase")]
pub enum SyntaxResult {
    Pass,
    Fail(Vec<Diagnostic>),
}

impl SyntaxResult {
    pub fn passed(&self) -> bool {
        matches!(self, SyntaxResult::Pass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breach: Option<Breach>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub output: String,
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Wall-clock timings, kept apart from the deterministic report body.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub syntax_ms: u64,
    pub tests_ms: u64,
    pub per_test_ms: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub syntax: SyntaxResult,
    pub tests: Vec<TestOutcome>,
    pub breaches: Vec<Breach>,
    pub fix_attempts: usize,
    /// Set when the code was refused before any execution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
    #[serde(skip)]
    pub timings: PhaseTimings,
}

impl ExecutionReport {
    fn rejected(reason: String) -> Self {
        Self {
            syntax: SyntaxResult::Fail(vec![]),
            tests: vec![],
            breaches: vec![Breach::DependencyNotAllowed],
            fix_attempts: 0,
            rejected: Some(reason),
            timings: PhaseTimings::default(),
        }
    }

    pub fn passed(&self) -> bool {
        self.rejected.is_none() && self.syntax.passed() && !self.tests.is_empty() && self.tests.iter().all(|t| t.passed)
    }

    pub fn failed_count(&self) -> usize {
        if !self.syntax.passed() {
            return usize::MAX;
        }
        self.tests.iter().filter(|t| !t.passed).count()
    }

    /// Short human/LLM-readable account of what went wrong.
    pub fn diagnostics_text(&self) -> String {
        let mut out = String::new();
        if let Some(r) = &self.rejected {
            out.push_str(&format!("rejected before execution: {r}\n"));
        }
        if let SyntaxResult::Fail(diags) = &self.syntax {
            for d in diags {
                match d.line {
                    Some(line) => out.push_str(&format!("syntax error at line {line}: {}\n", d.message)),
                    None => out.push_str(&format!("syntax error: {}\n", d.message)),
                }
            }
        }
        for t in self.tests.iter().filter(|t| !t.passed) {
            out.push_str(&format!("test `{}` failed: {}\n", t.name, t.failure.as_deref().unwrap_or("unknown")));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    profiles: BTreeMap<String, LanguageProfile>,
    pub limits: Limits,
    pub allowed_libraries: Vec<String>,
}

impl Default for Sandbox {
    fn default() -> Self {
        Self::new(Limits::default(), default_allowed_libraries())
    }
}

fn sanitize(text: &str, scratch: &Path) -> String {
    text.replace(&scratch.display().to_string(), "<scratch>")
}

impl Sandbox {
    pub fn new(limits: Limits, allowed_libraries: Vec<String>) -> Self {
        let python = LanguageProfile::python3();
        Self {
            profiles: BTreeMap::from([(python.id.clone(), python)]),
            limits,
            allowed_libraries,
        }
    }

    pub fn with_profile(mut self, profile: LanguageProfile) -> Self {
        self.profiles.insert(profile.id.clone(), profile);
        self
    }

    pub fn profile(&self, id: &str) -> Result<&LanguageProfile, SandboxError> {
        self.profiles.get(id).ok_or_else(|| SandboxError::ProfileMissing(id.to_owned()))
    }

    /// Declared and imported libraries outside the allow-list.
    pub fn disallowed_dependencies(&self, code: &ToolCode) -> Result<Vec<String>, SandboxError> {
        let profile = self.profile(&code.profile)?;
        let mut used: Vec<String> = code.dependencies.clone();
        for m in profile.imports(&code.source) {
            if !profile.builtin_modules.contains(&m) && !used.contains(&m) {
                used.push(m);
            }
        }
        Ok(used
            .into_iter()
            .filter(|d| !self.allowed_libraries.contains(d) && !profile.builtin_modules.contains(d))
            .collect())
    }

    fn scratch(&self) -> Result<tempfile::TempDir, SandboxError> {
        tempfile::Builder::new()
            .prefix("toolforge-")
            .tempdir()
            .map_err(|e| SandboxError::SandboxUnavailable(e.to_string()))
    }

    fn command(template: &[String], file: &Path, harness: &Path) -> Vec<String> {
        template
            .iter()
            .map(|a| {
                a.replace(profile::FILE_PLACEHOLDER, &file.display().to_string())
                    .replace(profile::HARNESS_PLACEHOLDER, &harness.display().to_string())
            })
            .collect()
    }

    pub fn syntax_check(&self, code: &ToolCode) -> Result<SyntaxResult, SandboxError> {
        let profile = self.profile(&code.profile)?;
        if code.source.trim().is_empty() {
            return Ok(SyntaxResult::Fail(vec![Diagnostic {
                line: None,
                column: None,
                message: "empty source: no entrypoint".into(),
            }]));
        }
        let scratch = self.scratch()?;
        let file = scratch.path().join(format!("tool.{}", profile.extension));
        fs::write(&file, &code.source).map_err(|e| SandboxError::SandboxUnavailable(e.to_string()))?;
        let argv = Self::command(&profile.check_command, &file, &file);
        let limits = Limits {
            wall_seconds: self.limits.wall_seconds,
            ..self.limits
        };
        let out = process::run_isolated(&argv, scratch.path(), b"", &limits)?;
        if out.exit_code == Some(0) {
            if !profile.functions(&code.source).contains(&code.entrypoint) {
                return Ok(SyntaxResult::Fail(vec![Diagnostic {
                    line: None,
                    column: None,
                    message: format!("entrypoint `{}` is not defined", code.entrypoint),
                }]));
            }
            return Ok(SyntaxResult::Pass);
        }
        let re = regex::Regex::new(r"(?m)^(\d+):(\d+): (.*)$").expect("static regex");
        let stderr = sanitize(&out.stderr, scratch.path());
        let mut diags: Vec<Diagnostic> = re
            .captures_iter(&stderr)
            .map(|c| Diagnostic {
                line: c[1].parse().ok().filter(|&l| l > 0),
                column: c[2].parse().ok().filter(|&c| c > 0),
                message: c[3].trim().to_owned(),
            })
            .collect();
        if diags.is_empty() {
            diags.push(Diagnostic {
                line: None,
                column: None,
                message: if out.timed_out {
                    "syntax check timed out".into()
                } else {
                    stderr.trim().to_owned()
                },
            });
        }
        Ok(SyntaxResult::Fail(diags))
    }

    /// Runs the tool once on `state` through the invocation protocol.
    pub fn invoke(&self, code: &ToolCode, state: &Value, args: &Value, predicate: Option<&str>) -> Result<Invocation, SandboxError> {
        let profile = self.profile(&code.profile)?;
        let scratch = self.scratch()?;
        let file = scratch.path().join(format!("tool.{}", profile.extension));
        let harness = scratch.path().join(format!("harness.{}", profile.extension));
        fs::write(&file, &code.source).map_err(|e| SandboxError::SandboxUnavailable(e.to_string()))?;
        fs::write(&harness, &profile.harness).map_err(|e| SandboxError::SandboxUnavailable(e.to_string()))?;
        let request = serde_json::json!({
            "state": state,
            "args": args,
            "entrypoint": code.entrypoint,
            "predicate": predicate,
            "no_network": self.limits.no_network,
        });
        let argv = Self::command(&profile.run_command, &file, &harness);
        let out = process::run_isolated(&argv, scratch.path(), request.to_string().as_bytes(), &self.limits)?;
        let stderr = sanitize(&out.stderr, scratch.path());
        let wall_ms = out.elapsed.as_millis() as u64;
        let mut predicate_result = None;
        let status = if out.timed_out {
            InvocationStatus::Breach { breach: Breach::WallTime }
        } else if stderr.contains(NETWORK_BREACH_MARKER) {
            InvocationStatus::Breach { breach: Breach::Network }
        } else if stderr.contains("MemoryError") {
            InvocationStatus::Breach { breach: Breach::Memory }
        } else {
            match serde_json::from_str::<Value>(out.stdout.trim()) {
                Ok(v) if v.get("ok") == Some(&Value::Bool(true)) => {
                    predicate_result = v.get("predicate").and_then(Value::as_bool);
                    InvocationStatus::Success {
                        state: v.get("state").cloned().unwrap_or(Value::Null),
                    }
                }
                Ok(v) if v.get("ok") == Some(&Value::Bool(false)) => {
                    let err = v.get("error").cloned().unwrap_or(Value::Null);
                    let message = sanitize(err.get("message").and_then(Value::as_str).unwrap_or(""), scratch.path());
                    if message.contains("network access denied") {
                        InvocationStatus::Breach { breach: Breach::Network }
                    } else {
                        InvocationStatus::ToolError {
                            error_type: err.get("type").and_then(Value::as_str).unwrap_or("Error").to_owned(),
                            message,
                        }
                    }
                }
                _ => InvocationStatus::ProtocolError {
                    message: format!(
                        "exit code {:?}; stdout not a protocol response: {}",
                        out.exit_code,
                        truncate(&sanitize(&out.stdout, scratch.path()), 400)
                    ),
                },
            }
        };
        Ok(Invocation {
            status,
            predicate: predicate_result,
            stderr: truncate(&stderr, 2000),
            wall_ms,
        })
    }

    fn run_case(&self, code: &ToolCode, case: &TestCase, oracle: &dyn StateOracle) -> Result<TestOutcome, SandboxError> {
        let input = case.setup.clone().unwrap_or_else(|| oracle.empty_state());
        let predicate = match &case.expected {
            Assertion::CustomPredicate(p) => Some(p.as_str()),
            _ => None,
        };
        let inv = self.invoke(code, &input, &case.args, predicate)?;
        let mut outcome = TestOutcome {
            name: case.name.clone(),
            passed: false,
            failure: None,
            breach: None,
            output: inv.stderr.clone(),
            wall_ms: inv.wall_ms,
        };
        let state = match &inv.status {
            InvocationStatus::Success { state } => state,
            InvocationStatus::Breach { breach } => {
                outcome.breach = Some(*breach);
                outcome.failure = inv.failure_text();
                return Ok(outcome);
            }
            _ => {
                outcome.failure = inv.failure_text();
                return Ok(outcome);
            }
        };
        if let Err(e) = oracle.validate_state(&input, state) {
            outcome.failure = Some(format!("returned invalid state: {e}"));
            return Ok(outcome);
        }
        let verdict: Result<(), String> = match &case.expected {
            Assertion::ReturnsValidState => Ok(()),
            Assertion::OutputContains(needle) => {
                if state.to_string().contains(needle.as_str()) {
                    Ok(())
                } else {
                    Err(format!("output does not contain `{needle}`"))
                }
            }
            Assertion::ScoreDeltaSign(sign) => match oracle.score_delta(&input, state) {
                Some(d) if sign.holds(d) => Ok(()),
                Some(d) => Err(format!("score delta {d:.4} does not satisfy {sign:?}")),
                None => Err("score delta not measurable for this problem".into()),
            },
            Assertion::CustomPredicate(p) => match inv.predicate {
                Some(true) => Ok(()),
                _ => Err(format!("predicate `{p}` is false")),
            },
        };
        match verdict {
            Ok(()) => outcome.passed = true,
            Err(e) => outcome.failure = Some(e),
        }
        Ok(outcome)
    }

    /// Syntax check then every test case in its own process.
    pub fn run_tests(&self, code: &ToolCode, tests: &TestSuite, oracle: &dyn StateOracle) -> Result<ExecutionReport, SandboxError> {
        let bad = self.disallowed_dependencies(code)?;
        if !bad.is_empty() {
            return Ok(ExecutionReport::rejected(format!("libraries not allowed: {}", bad.join(", "))));
        }
        let start = Instant::now();
        let syntax = self.syntax_check(code)?;
        let syntax_ms = start.elapsed().as_millis() as u64;
        let mut report = ExecutionReport {
            syntax,
            tests: Vec::new(),
            breaches: Vec::new(),
            fix_attempts: 0,
            rejected: None,
            timings: PhaseTimings {
                syntax_ms,
                ..PhaseTimings::default()
            },
        };
        if !report.syntax.passed() {
            return Ok(report);
        }
        let start = Instant::now();
        let outcomes: Vec<Result<TestOutcome, SandboxError>> = std::thread::scope(|s| {
            let handles: Vec<_> = tests
                .cases
                .iter()
                .map(|case| s.spawn(move || self.run_case(code, case, oracle)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(SandboxError::SandboxUnavailable("test runner panicked".into()))))
                .collect()
        });
        for outcome in outcomes {
            let outcome = outcome?;
            if let Some(b) = outcome.breach {
                report.breaches.push(b);
            }
            report.timings.per_test_ms.push(outcome.wall_ms);
            report.tests.push(outcome);
        }
        report.timings.tests_ms = start.elapsed().as_millis() as u64;
        Ok(report)
    }

    /// A smoke test calling the entrypoint on the empty state.
    pub fn auto_generate_tests(&self, code: &ToolCode) -> Result<TestSuite, SandboxError> {
        let profile = self.profile(&code.profile)?;
        let functions = profile.functions(&code.source);
        let entry = if functions.contains(&code.entrypoint) {
            code.entrypoint.clone()
        } else if functions.len() == 1 {
            functions[0].clone()
        } else {
            return Err(SandboxError::EntrypointUndetectable);
        };
        Ok(TestSuite {
            cases: vec![TestCase {
                name: format!("smoke_{entry}_on_empty_state"),
                setup: None,
                args: Value::Object(Default::default()),
                expected: Assertion::ReturnsValidState,
            }],
            origin: TestOrigin::AutoGenerated,
        })
    }

    /// Up to `max_autofix` repair rounds; each round hands the current code and
    /// failing report to `repair` and re-runs the (immutable) tests.
    pub fn autofix_loop(
        &self,
        code: ToolCode,
        report: ExecutionReport,
        tests: &TestSuite,
        oracle: &dyn StateOracle,
        max_autofix: usize,
        repair: &mut dyn FnMut(&ToolCode, &ExecutionReport, usize) -> Result<ToolCode, SandboxError>,
    ) -> Result<(ToolCode, ExecutionReport), SandboxError> {
        let (mut code, mut report) = (code, report);
        let mut attempts = report.fix_attempts;
        while !report.passed() && attempts < max_autofix {
            attempts += 1;
            let candidate = repair(&code, &report, attempts)?;
            let mut next = self.run_tests(&candidate, tests, oracle)?;
            next.fix_attempts = attempts;
            code = candidate;
            report = next;
        }
        report.fix_attempts = attempts;
        Ok((code, report))
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_owned();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &s[..end])
}
