//! Chat backends: a remote JSON chat-completion client and a scripted replay
//! used for deterministic sessions.

use std::collections::HashMap;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{AgentError, AgentKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    RemoteHttp,
    ScriptedReplay,
}

/// One completion request for one candidate of one agent step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub agent: AgentKind,
    /// Per-agent inference counter kept by the caller.
    pub step: u64,
    pub candidate: usize,
    pub prompt: String,
    pub temperature: f64,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn kind(&self) -> BackendKind;
    fn complete(&self, request: &ChatRequest) -> Result<String, AgentError>;
    /// Prompt size limit in estimated tokens, if the backend has one.
    fn max_prompt_tokens(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub agent: AgentKind,
    pub step: u64,
    pub responses: Vec<String>,
}

/// Replay file contents: responses keyed by (agent kind, step index).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayScript {
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
}

impl ReplayScript {
    pub fn push(&mut self, agent: AgentKind, step: u64, responses: Vec<String>) -> &mut Self {
        self.entries.push(ScriptEntry { agent, step, responses });
        self
    }
}

pub struct ScriptedBackend {
    id: String,
    responses: HashMap<(AgentKind, u64), Vec<String>>,
    max_prompt_tokens: Option<usize>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, script: ReplayScript) -> Self {
        let mut responses = HashMap::new();
        for e in script.entries {
            responses.insert((e.agent, e.step), e.responses);
        }
        Self {
            id: id.into(),
            responses,
            max_prompt_tokens: None,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_prompt_limit(mut self, tokens: usize) -> Self {
        self.max_prompt_tokens = Some(tokens);
        self
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::ScriptedReplay
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, AgentError> {
        self.log.lock().push(request.clone());
        self.responses
            .get(&(request.agent, request.step))
            .and_then(|r| r.get(request.candidate))
            .cloned()
            .ok_or(AgentError::ReplayExhausted {
                agent: request.agent,
                step: request.step,
                candidate: request.candidate,
            })
    }

    fn max_prompt_tokens(&self) -> Option<usize> {
        self.max_prompt_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteChatConfig {
    pub backend_id: String,
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default)]
    pub key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    #[serde(default)]
    pub max_prompt_tokens: Option<usize>,
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_s() -> u64 {
    120
}

pub struct RemoteChatBackend {
    config: RemoteChatConfig,
    agent: ureq::Agent,
}

impl RemoteChatBackend {
    pub fn new(config: RemoteChatConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .build()
            .into();
        Self { config, agent }
    }

    fn request_once(&self, request: &ChatRequest) -> Result<String, String> {
        #[derive(Deserialize)]
        struct Message {
            content: String,
        }
        #[derive(Deserialize)]
        struct Choice {
            message: Message,
        }
        #[derive(Deserialize)]
        struct Response {
            choices: Vec<Choice>,
        }
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(var) = &self.config.key_env {
            let key = std::env::var(var).map_err(|_| format!("missing env var {var}"))?;
            let value = if self.config.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {key}")
            } else {
                key
            };
            req = req.header(self.config.auth_header.as_str(), value);
        }
        let mut response = req.send_json(&body).map_err(|e| e.to_string())?;
        let parsed: Response = response.body_mut().read_json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "response has no choices".into())
    }
}

impl ChatBackend for RemoteChatBackend {
    fn id(&self) -> &str {
        &self.config.backend_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::RemoteHttp
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, AgentError> {
        let mut last_error = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1)));
            }
            match self.request_once(request) {
                Ok(text) => return Ok(text),
                Err(e) => last_error = e,
            }
        }
        Err(AgentError::BackendUnavailable(format!("{}: {last_error}", self.config.backend_id)))
    }

    fn max_prompt_tokens(&self) -> Option<usize> {
        self.config.max_prompt_tokens
    }
}

/// Backend settings as they appear in session configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    ScriptedReplay {
        backend_id: String,
        /// Inline script; `script_path` is resolved by the caller when set.
        #[serde(default)]
        script: ReplayScript,
        #[serde(default)]
        script_path: Option<String>,
    },
    RemoteHttp(RemoteChatConfig),
}

impl BackendConfig {
    /// Instantiates the backend. Scripted backends use the inline script.
    pub fn build(&self) -> Arc<dyn ChatBackend> {
        match self {
            BackendConfig::ScriptedReplay { backend_id, script, .. } => Arc::new(ScriptedBackend::new(backend_id.clone(), script.clone())),
            BackendConfig::RemoteHttp(cfg) => Arc::new(RemoteChatBackend::new(cfg.clone())),
        }
    }
}
