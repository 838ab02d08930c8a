//! Config and problem loading shared by the CLI and the service.

use std::fs;
use std::path::{Path, PathBuf};

use toolforge_core::corpus::{export_dataset, ingest_document, load_dataset, DocumentFormat};
use toolforge_core::env::ProblemInstance;
use toolforge_core::orchestrator::{run_session, Runtime, SessionConfig, SessionMode, SessionSummary};
use toolforge_core::scoring::ScoreConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] Box<dyn std::error::Error + Send + Sync>),
}

impl CliError {
    pub fn core(e: impl std::error::Error + Send + Sync + 'static) -> Self {
        CliError::Core(Box::new(e))
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_owned(),
        source,
    })
}

/// Parses a TOML or JSON file (by extension) into `T`.
pub fn parse_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|reason| CliError::Parse {
        path: path.to_owned(),
        reason,
    })
}

pub fn load_config(path: &Path) -> Result<SessionConfig, CliError> {
    let config: SessionConfig = parse_file(path)?;
    config.validate().map_err(CliError::core)?;
    Ok(config)
}

/// Problems from a dataset directory (written by `ingest`) or from a JSON
/// file holding a list of problem instances.
pub fn load_problems(path: &Path, score: &ScoreConfig) -> Result<Vec<ProblemInstance>, CliError> {
    if path.is_dir() {
        let records = load_dataset(path).map_err(CliError::core)?;
        return Ok(records
            .into_iter()
            .map(|r| ProblemInstance::from_record(r, *score))
            .collect());
    }
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

/// Ingests every regular file in `dir` and writes the dataset to `out`.
pub fn ingest_dir(dir: &Path, format: DocumentFormat, out: &Path) -> Result<usize, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| CliError::Read {
            path: dir.to_owned(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for path in &paths {
        let record = ingest_document(&read(path)?, format).map_err(|e| CliError::Parse {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    export_dataset(&records, out).map_err(CliError::core)
}

/// One sweep trial: an unattended session over `problems`.
pub fn run_trial(config: &SessionConfig, problems: &[ProblemInstance]) -> Result<SessionSummary, String> {
    let mut config = config.clone();
    if config.human.is_none() {
        config.mode = SessionMode::Auto;
    }
    let runtime = Runtime::from_config(&config);
    run_session(config, problems.to_vec(), runtime)
        .map(|(summary, _)| summary)
        .map_err(|e| e.to_string())
}
