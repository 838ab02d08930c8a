pub mod corpus;
pub mod embedding;
pub mod scoring;
pub mod sandbox;
pub mod env;
pub mod library;
pub mod agents;
pub mod hitl;
pub mod orchestrator;
pub mod fixtures;
pub mod sweep;
pub mod synthetic;

pub use agents::{AgentKind, AgentSpec, AutomationType, BackendConfig, FeedbackItem, Verdict};
pub use corpus::{DocClass, DocumentRecord, PlanNode, PlanPath, Section};
pub use embedding::{Embedder, ProviderConfig};
pub use env::{DocumentState, ProblemEnv, ProblemInstance};
pub use hitl::{GuidanceAction, GuidanceDecision, GuidanceRequest, Phase};
pub use library::{ToolLibrary, ToolRecord, ToolStatus};
pub use orchestrator::{OrchestratorError, Runtime, Session, SessionConfig, SessionEvent, SessionMode, SessionSummary};
pub use scoring::{compute_score, ScoreBreakdown, ScoreConfig, ScoreWeights};
pub use sweep::{SweepReport, SweepSpace};
