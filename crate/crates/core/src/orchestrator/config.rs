use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::OrchestratorError;
use crate::agents::{AgentKind, AgentSpec, BackendConfig};
use crate::embedding::ProviderConfig;
use crate::hitl::{DeadlinePolicy, ScriptedHumanFile, TriggerConfig, DEFAULT_BENEFIT_PRIOR};
use crate::sandbox::Limits;
use crate::scoring::ScoreConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SessionMode {
    #[default]
    Auto,
    Hitl,
    Hybrid {
        switch_after_s: f64,
    },
}

/// Source of elapsed time for hybrid switching and wall budgets.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SessionClock {
    #[default]
    Wall,
    /// Each iteration counts as `iteration_seconds`, plus recorded human seconds.
    Logical { iteration_seconds: f64 },
}

/// The four agent specs. Each entry may be partial; missing fields keep the
/// defaults for that agent kind.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSet {
    pub coach: AgentSpec,
    pub coder: AgentSpec,
    pub critic: AgentSpec,
    pub capitalizer: AgentSpec,
}

impl Default for AgentSet {
    fn default() -> Self {
        Self {
            coach: AgentSpec::default_for(AgentKind::Coach),
            coder: AgentSpec::default_for(AgentKind::Coder),
            critic: AgentSpec::default_for(AgentKind::Critic),
            capitalizer: AgentSpec::default_for(AgentKind::Capitalizer),
        }
    }
}

impl AgentSet {
    pub fn get(&self, kind: AgentKind) -> &AgentSpec {
        match kind {
            AgentKind::Coach => &self.coach,
            AgentKind::Coder => &self.coder,
            AgentKind::Critic => &self.critic,
            AgentKind::Capitalizer => &self.capitalizer,
        }
    }

    pub fn get_mut(&mut self, kind: AgentKind) -> &mut AgentSpec {
        match kind {
            AgentKind::Coach => &mut self.coach,
            AgentKind::Coder => &mut self.coder,
            AgentKind::Critic => &mut self.critic,
            AgentKind::Capitalizer => &mut self.capitalizer,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &AgentSpec> {
        AgentKind::ALL.into_iter().map(|k| self.get(k))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

impl<'de> Deserialize<'de> for AgentSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let patches: BTreeMap<String, Value> = BTreeMap::deserialize(d)?;
        let mut set = AgentSet::default();
        for (name, patch) in patches {
            let kind: AgentKind = name.parse().map_err(serde::de::Error::custom)?;
            let mut base = serde_json::to_value(set.get(kind)).map_err(serde::de::Error::custom)?;
            merge(&mut base, patch);
            let spec: AgentSpec = serde_json::from_value(base).map_err(serde::de::Error::custom)?;
            if spec.kind != kind {
                return Err(serde::de::Error::custom(format!("agent `{name}` declares kind {}", spec.kind)));
            }
            *set.get_mut(kind) = spec;
        }
        Ok(set)
    }
}

/// Human time costs and post-guidance reliability used by the intervention planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCosts {
    pub pre_seconds: f64,
    pub post_seconds: f64,
    pub reliability_after: f64,
    pub benefit_prior: f64,
}

impl Default for InterventionCosts {
    fn default() -> Self {
        Self {
            pre_seconds: 60.0,
            post_seconds: 90.0,
            reliability_after: 0.95,
            benefit_prior: DEFAULT_BENEFIT_PRIOR,
        }
    }
}

/// A code primitive loaded into the library before the first iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub name: String,
    pub description: String,
    pub source: String,
    #[serde(default)]
    pub usage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub session_id: Option<String>,
    pub problem_ids: Vec<String>,
    pub agents: AgentSet,
    pub backends: BTreeMap<String, BackendConfig>,
    pub score: ScoreConfig,
    pub embedding: ProviderConfig,
    pub max_autofix: usize,
    /// Coder retries per tool after the first attempt.
    pub retry_budget: u32,
    pub iteration_budget: u64,
    /// Human time budget T in seconds, for the whole session.
    pub time_budget_s: f64,
    pub wall_budget_s: Option<f64>,
    pub mode: SessionMode,
    pub seed: u64,
    pub limits: Limits,
    pub allowed_libraries: Vec<String>,
    pub triggers: TriggerConfig,
    pub interventions: InterventionCosts,
    pub deadline: Option<DeadlinePolicy>,
    pub clock: SessionClock,
    pub primitives: Vec<Primitive>,
    /// Offline human decisions; the service supplies a live queue instead.
    pub human: Option<ScriptedHumanFile>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            session_id: None,
            problem_ids: Vec::new(),
            agents: AgentSet::default(),
            backends: BTreeMap::new(),
            score: ScoreConfig::default(),
            embedding: ProviderConfig::default(),
            max_autofix: 3,
            retry_budget: 3,
            iteration_budget: 10,
            time_budget_s: 1800.0,
            wall_budget_s: None,
            mode: SessionMode::Auto,
            seed: 0,
            limits: Limits::default(),
            allowed_libraries: vec!["json".into(), "re".into(), "math".into(), "collections".into()],
            triggers: TriggerConfig::default(),
            interventions: InterventionCosts::default(),
            deadline: None,
            clock: SessionClock::Wall,
            primitives: Vec::new(),
            human: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::InvalidConfig(m));
        for agent in self.agents.iter() {
            agent.validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        }
        self.score.weights.validate().map_err(|e| OrchestratorError::InvalidConfig(e.to_string()))?;
        if !(self.time_budget_s >= 0.0) {
            return bad("time budget must be >= 0".into());
        }
        if let SessionMode::Hybrid { switch_after_s } = self.mode {
            if !(switch_after_s >= 0.0) {
                return bad("hybrid switch-after must be >= 0".into());
            }
            if let Some(wall) = self.wall_budget_s {
                if switch_after_s >= wall {
                    return bad(format!("hybrid switch-after {switch_after_s}s is not below the wall budget {wall}s"));
                }
            }
        }
        if let SessionClock::Logical { iteration_seconds } = self.clock {
            if !(iteration_seconds >= 0.0) {
                return bad("logical iteration seconds must be >= 0".into());
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.problem_ids {
            if !seen.insert(id) {
                return bad(format!("problem `{id}` listed twice"));
            }
        }
        Ok(())
    }

    /// The configured id, or one derived from the configuration content.
    pub fn resolved_session_id(&self) -> String {
        if let Some(id) = &self.session_id {
            return id.clone();
        }
        let body = serde_json::to_vec(self).expect("config serializes");
        format!("session-{}", &hex::encode(Sha256::digest(&body))[..12])
    }

    /// Deadline applied to guidance requests when none is configured.
    pub fn deadline_policy(&self) -> DeadlinePolicy {
        self.deadline.unwrap_or(match self.mode {
            SessionMode::Hybrid { .. } => DeadlinePolicy::TimeoutToAuto { seconds: 60.0 },
            _ => DeadlinePolicy::Block,
        })
    }
}
