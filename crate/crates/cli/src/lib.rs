//! Batch CLI and HTTP service for the tool-learning engine.

pub mod runner;
pub mod service;

pub use runner::CliError;
pub use service::{router, AppState};
