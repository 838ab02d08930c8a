//! Session orchestration: the agent loop, its event log and persistence.

pub mod config;
pub mod events;
pub mod session;
pub mod state;
pub mod store;

pub use config::{AgentSet, InterventionCosts, Primitive, SessionClock, SessionConfig, SessionMode};
pub use events::{
    event_hash, parse_jsonl, to_jsonl, verify_chain, EventKind, EventLog, SessionEvent, EVENT_SCHEMA_VERSION, GENESIS_HASH,
};
pub use session::{run_session, Runtime, Session};
pub use state::{payload, replay, replay_state, IterationOutcome, SessionSnapshot, SessionState, SessionSummary};
pub use store::{list_sessions, load_session, persist_session, purge_feedback, session_dir, PersistOutcome};

use crate::agents::AgentError;
use crate::env::EnvError;
use crate::hitl::HitlError;
use crate::library::LibraryError;
use crate::sandbox::SandboxError;
use crate::scoring::ScoringError;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("iteration budget exhausted")]
    BudgetExhausted,
    #[error("session has ended")]
    SessionEnded,
    #[error("corrupt event log at sequence {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("unknown feedback item `{0}`")]
    UnknownFeedback(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Hitl(#[from] HitlError),
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}
