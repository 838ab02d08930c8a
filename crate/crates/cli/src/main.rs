use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use toolforge_cli::runner::{ingest_dir, load_config, load_problems, parse_file, read, run_trial, CliError};
use toolforge_cli::{router, AppState};
use toolforge_core::corpus::{parse_record, DocumentFormat};
use toolforge_core::embedding::ProviderConfig;
use toolforge_core::orchestrator::{
    parse_jsonl, persist_session, replay, to_jsonl, verify_chain, Runtime, Session, SessionConfig, SessionMode,
};
use toolforge_core::scoring::{compute_score, ScoreConfig, ScoreWeights};
use toolforge_core::sweep::{sweep, SweepSpace};

#[derive(Parser)]
#[command(name = "toolforge", version, about = "Human-steered tool learning sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Auto,
    Hitl,
    Hybrid,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw documents into a dataset directory.
    Ingest {
        dir: PathBuf,
        #[arg(long, default_value = "markdown-like")]
        format: String,
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Run one session to completion and print its summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory or JSON list of problem instances.
        #[arg(long)]
        problems: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Seconds of guided work before a hybrid session goes automatic.
        #[arg(long)]
        switch_after: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Persist the session under this store root.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Write the event log here as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Score a generated record against a target record.
    Score {
        generated: PathBuf,
        target: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Random search over session config fields.
    Sweep {
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify an event log and print the state it rebuilds.
    Replay { events: PathBuf },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

fn print(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

/// A record file, checked under the id it declares.
fn record(path: &std::path::Path) -> Result<toolforge_core::DocumentRecord, CliError> {
    let text = read(path)?;
    let id = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_owned))
        .unwrap_or_else(|| path.display().to_string());
    parse_record(&id, &text).map_err(CliError::core)
}

fn apply_mode(config: &mut SessionConfig, mode: Option<Mode>, switch_after: Option<f64>) -> Result<(), CliError> {
    config.mode = match (mode, switch_after) {
        (None, None) => return Ok(()),
        (Some(Mode::Auto), None) => SessionMode::Auto,
        (Some(Mode::Hitl), None) => SessionMode::Hitl,
        (Some(Mode::Hybrid) | None, Some(s)) => SessionMode::Hybrid { switch_after_s: s },
        (Some(Mode::Hybrid), None) => return Err(CliError::Invalid("--mode hybrid needs --switch-after".into())),
        (Some(_), Some(_)) => return Err(CliError::Invalid("--switch-after only applies to hybrid mode".into())),
    };
    config.validate().map_err(CliError::core)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest { dir, format, out } => {
            let format: DocumentFormat = format.parse().map_err(CliError::core)?;
            let n = ingest_dir(&dir, format, &out)?;
            print(&json!({ "ingested": n, "dataset": out }));
        }
        Command::Run {
            config,
            problems,
            mode,
            switch_after,
            seed,
            store,
            events,
        } => {
            let mut config = load_config(&config)?;
            apply_mode(&mut config, mode, switch_after)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let problems = load_problems(&problems, &config.score)?;
            let runtime = Runtime::from_config(&config);
            let mut session = Session::start(config, problems, runtime).map_err(CliError::core)?;
            let result = session.run();
            if let Some(root) = &store {
                persist_session(root, session.id(), &session.events()).map_err(CliError::core)?;
            }
            if let Some(path) = &events {
                std::fs::write(path, to_jsonl(&session.events())).map_err(|source| CliError::Read {
                    path: path.clone(),
                    source,
                })?;
            }
            print(&result.map_err(CliError::core)?);
        }
        Command::Score {
            generated,
            target,
            weights,
            tau,
        } => {
            let g = record(&generated)?;
            let t = record(&target)?;
            let mut config = ScoreConfig::default();
            if let Some(path) = weights {
                config.weights = parse_file::<ScoreWeights>(&path)?;
            }
            if let Some(tau) = tau {
                config.tau = tau;
            }
            let embedder = ProviderConfig::default().build();
            print(&compute_score(&g, &t, &config, &embedder).map_err(CliError::core)?);
        }
        Command::Sweep {
            space,
            config,
            problems,
            trials,
            seed,
        } => {
            let mut space: SweepSpace = parse_file(&space)?;
            if let Some(n) = trials {
                space.trials = n;
            }
            if let Some(s) = seed {
                space.seed = s;
            }
            let base = load_config(&config)?;
            let problems = load_problems(&problems, &base.score)?;
            let report = sweep(&space, &base, |c| run_trial(c, &problems)).map_err(CliError::core)?;
            print(&report);
        }
        Command::Replay { events } => {
            let events = parse_jsonl(&read(&events)?)
                .map_err(|line| CliError::Invalid(format!("unparseable event on line {}", line + 1)))?;
            verify_chain(&events).map_err(|seq| CliError::Invalid(format!("hash chain broken at sequence {seq}")))?;
            let snapshot = replay(&events).map_err(CliError::core)?;
            print(&snapshot);
        }
        Command::Serve {
            port,
            host,
            problems,
            store,
        } => {
            let problems = load_problems(&problems, &ScoreConfig::default())?;
            let app = router(AppState::new(problems, store));
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Invalid(e.to_string()))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .map_err(|e| CliError::Invalid(format!("cannot bind {host}:{port}: {e}")))?;
                tracing::info!(%host, port, "listening");
                axum::serve(listener, app).await.map_err(|e| CliError::Invalid(e.to_string()))
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
