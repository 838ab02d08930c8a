use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand_chacha::rand_core::SeedableRng;
use serde_json::{json, Value};
use toolforge_core::corpus::DocClass;
use toolforge_core::fixtures::{sample_problems, scripted_config, ScriptBuilder};
use toolforge_core::synthetic::synthetic_markdown;

fn toolforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toolforge")).args(args).output().unwrap()
}

fn json_out(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_config(dir: &Path, id: &str) -> String {
    let mut b = ScriptBuilder::new();
    b.clean_iteration("add_intro");
    let mut config = scripted_config(b.build(), 1);
    config.session_id = Some(id.into());
    let path = dir.join("session.toml");
    fs::write(&path, toml::to_string(&config).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn write_problems(dir: &Path) -> String {
    let path = dir.join("problems.json");
    fs::write(&path, serde_json::to_string(&sample_problems()).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn score_of_a_record_against_itself_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let target = sample_problems().remove(0).target.unwrap();
    let path = dir.path().join("t.json");
    fs::write(&path, serde_json::to_string(&target).unwrap()).unwrap();
    let p = path.to_str().unwrap();
    let v = json_out(&toolforge(&["score", p, p]));
    assert!((v["total"].as_f64().unwrap() - 100.0).abs() < 1e-6, "{v}");
    let v = json_out(&toolforge(&["score", p, p, "--tau", "0.9"]));
    assert!((v["total"].as_f64().unwrap() - 100.0).abs() < 1e-6);
}

#[test]
fn ingest_run_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir(&raw).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for (i, class) in [DocClass::Survey, DocClass::Patent].into_iter().enumerate() {
        fs::write(raw.join(format!("doc{i}.md")), synthetic_markdown(&mut rng, &format!("doc-{i}"), class)).unwrap();
    }
    let dataset = dir.path().join("dataset");
    let v = json_out(&toolforge(&["ingest", raw.to_str().unwrap(), "--format", "markdown", "--out", dataset.to_str().unwrap()]));
    assert_eq!(v["ingested"], 2);

    let config = write_config(dir.path(), "cli-run");
    let store = dir.path().join("store");
    let events = dir.path().join("events.jsonl");
    let summary = json_out(&toolforge(&[
        "run",
        "--config",
        &config,
        "--problems",
        dataset.to_str().unwrap(),
        "--seed",
        "9",
        "--store",
        store.to_str().unwrap(),
        "--events",
        events.to_str().unwrap(),
    ]));
    assert_eq!(summary["iterations"], 1);
    assert_eq!(summary["best_scores"].as_object().unwrap().len(), 2);
    assert!(store.join("sessions/cli-run/events.jsonl").is_file());

    let snapshot = json_out(&toolforge(&["replay", events.to_str().unwrap()]));
    assert_eq!(snapshot["summary"], summary);

    let text = fs::read_to_string(&events).unwrap();
    let tampered = text.replacen("\"iteration\":0", "\"iteration\":7", 1);
    assert_ne!(tampered, text);
    fs::write(&events, tampered).unwrap();
    let out = toolforge(&["replay", events.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash chain broken"));
}

#[test]
fn guided_run_without_an_operator_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "cli-guided");
    let problems = write_problems(dir.path());
    let out = toolforge(&["run", "--config", &config, "--problems", &problems, "--mode", "hitl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("human channel"));
    let out = toolforge(&["run", "--config", &config, "--problems", &problems, "--mode", "hybrid"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--switch-after"));
}

#[test]
fn sweep_reports_the_best_trial() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "cli-sweep");
    let problems = write_problems(dir.path());
    let space = dir.path().join("space.json");
    let body = json!({"params": [{"name": "max_autofix", "kind": "int-range", "lo": 0, "hi": 2}], "trials": 1});
    fs::write(&space, body.to_string()).unwrap();
    let args = ["sweep", "--space", space.to_str().unwrap(), "--config", &config, "--problems", &problems, "--trials", "2", "--seed", "1"];
    let first = json_out(&toolforge(&args));
    assert_eq!(first["trials"].as_array().unwrap().len(), 2);
    assert_eq!(first["best_config"]["session_id"], "cli-sweep-trial-".to_owned() + &first["best"].to_string());
    let second = json_out(&toolforge(&args));
    assert_eq!(first["trials"], second["trials"]);
}

#[test]
fn example_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config");
    let config = toolforge_cli::runner::load_config(&root.join("session.example.toml")).unwrap();
    assert_eq!(config.agents.coder.candidates, 3);
    assert_eq!(config.agents.coach.candidates, 2);
    let space: toolforge_core::sweep::SweepSpace = toolforge_cli::runner::parse_file(&root.join("sweep.example.toml")).unwrap();
    space.validate(&config).unwrap();
    assert_eq!(space.params.len(), 3);
}
