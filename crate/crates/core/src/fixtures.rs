//! Small offline problems and scripted agent answers, for demos, tests and
//! benchmarks.

use std::collections::BTreeMap;

use crate::agents::{AgentKind, BackendConfig, ReplayScript};
use crate::corpus::{ingest_document, DocumentFormat};
use crate::env::ProblemInstance;
use crate::orchestrator::{SessionClock, SessionConfig};
use crate::scoring::ScoreConfig;

pub const BACKEND_ID: &str = "default";

const REEF: &str = "---\nid: reef-robotics\ndoc_class: survey\n---\n# Reef robotics\n\nUnderwater drones for coral reef monitoring.\n\n## Introduction\nUnderwater drones for coral reef monitoring.\n\n## Results\nSurvey accuracy improved with repeated passes.\n\n## References\n[1] Lee, K. Reef drones. 2021.\n";

const BATTERY: &str = "---\nid: battery-recycling\ndoc_class: encyclopedia\n---\n# Battery recycling\n\nRecovering lithium and cobalt from spent cells.\n\n## Introduction\nRecovering lithium and cobalt from spent cells.\n\n## Processes\nHydrometallurgy leaches metals from black mass.\n\n## References\n[1] Ortiz, M. Cell recovery. 2019.\n";

/// Two hidden-reference problems with short targets.
pub fn sample_problems() -> Vec<ProblemInstance> {
    [REEF, BATTERY]
        .into_iter()
        .map(|raw| {
            let record = ingest_document(raw, DocumentFormat::MarkdownLike).expect("fixture parses");
            ProblemInstance::from_record(record, ScoreConfig::default())
        })
        .collect()
}

/// Copies the abstract into an Introduction section.
pub const INTRO_TOOL: &str = r#"def run(state, args):
    for child in state["plan"]["children"]:
        if child["title"] == "Introduction":
            return state
    state["plan"]["children"].append({"title": "Introduction", "children": []})
    path = str(len(state["plan"]["children"]))
    state["sections"].append({"path": path, "content": state["abstract"]})
    return state
"#;

pub const BROKEN_TOOL: &str = "def run(state, args):\n    raise ValueError('not implemented')\n";

pub fn spec_answer(name: &str, purpose: &str) -> String {
    format!("```toolspec\nname: {name}\npurpose: {purpose}\ninput: document state\noutput: document state\ntest: adds a section\nnovelty: new\n```\n")
}

pub fn code_answer(source: &str) -> String {
    format!("```python\n{source}```\n")
}

pub fn verdict_answer(verdict: &str, instructions: &str) -> String {
    format!("VERDICT: {verdict}\nINSTRUCTIONS: {instructions}\n")
}

pub fn description_answer(description: &str) -> String {
    format!("DESCRIPTION: {description}\nUSAGE: run(state, {{}})\n")
}

/// Builds a replay script by appending answers in call order, keeping one
/// step counter per agent.
#[derive(Debug, Clone, Default)]
pub struct ScriptBuilder {
    script: ReplayScript,
    steps: BTreeMap<AgentKind, u64>,
}

impl ScriptBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// One agent step with one response per candidate.
    pub fn step(&mut self, agent: AgentKind, responses: Vec<String>) -> &mut Self {
        let step = self.steps.entry(agent).or_insert(0);
        self.script.push(agent, *step, responses);
        *step += 1;
        self
    }

    /// Consumes a step without a scripted answer, for steps a human answers.
    pub fn skip(&mut self, agent: AgentKind) -> &mut Self {
        *self.steps.entry(agent).or_insert(0) += 1;
        self
    }

    pub fn coach(&mut self, text: String) -> &mut Self {
        self.step(AgentKind::Coach, vec![text])
    }

    pub fn coder(&mut self, text: String) -> &mut Self {
        self.step(AgentKind::Coder, vec![text])
    }

    pub fn critic(&mut self, text: String) -> &mut Self {
        self.step(AgentKind::Critic, vec![text])
    }

    pub fn capitalizer(&mut self, text: String) -> &mut Self {
        self.step(AgentKind::Capitalizer, vec![text])
    }

    /// Coach, passing Coder, accepting Critic and Capitalizer.
    pub fn clean_iteration(&mut self, name: &str) -> &mut Self {
        self.coach(spec_answer(name, "add an introduction section from the abstract"))
            .coder(code_answer(INTRO_TOOL))
            .critic(verdict_answer("accept", ""))
            .capitalizer(description_answer("Adds an Introduction section holding the abstract."))
    }

    pub fn build(&self) -> ReplayScript {
        self.script.clone()
    }
}

/// A deterministic single-candidate configuration on one scripted backend.
pub fn scripted_config(script: ReplayScript, iterations: u64) -> SessionConfig {
    let mut config = SessionConfig {
        session_id: Some("fixture".into()),
        iteration_budget: iterations,
        max_autofix: 0,
        clock: SessionClock::Logical { iteration_seconds: 60.0 },
        ..SessionConfig::default()
    };
    for kind in AgentKind::ALL {
        config.agents.get_mut(kind).candidates = 1;
    }
    config.backends.insert(
        BACKEND_ID.into(),
        BackendConfig::ScriptedReplay {
            backend_id: BACKEND_ID.into(),
            script,
            script_path: None,
        },
    );
    config
}
