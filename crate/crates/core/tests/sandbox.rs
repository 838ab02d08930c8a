use std::time::Instant;

use serde_json::json;
use toolforge_core::corpus::{ingest_document, DocumentFormat};
use toolforge_core::embedding::Embedder;
use toolforge_core::env::{DocumentState, EnvError, ProblemEnv, ProblemInstance, SchemaOracle};
use toolforge_core::sandbox::{
    Assertion, Breach, DeltaSign, Limits, Sandbox, SandboxError, SyntaxResult, TestCase, TestOrigin, TestSuite,
    ToolCode,
};
use toolforge_core::scoring::ScoreConfig;

const WRITE_INTRO: &str = r#"
def run(state, args):
    state["plan"]["children"].append({"title": "Introduction", "children": []})
    path = str(len(state["plan"]["children"]))
    state["sections"].append({"path": path, "content": "coral reef monitoring with underwater drones"})
    return state
"#;

const IDENTITY: &str = "def run(state, args):\n    return state\n";

const RAISES: &str = "def run(state, args):\n    raise ValueError('boom')\n";

const SPIN: &str = "def run(state, args):\n    while True:\n        pass\n";

const NETWORK: &str = r#"
import urllib.request

def run(state, args):
    try:
        urllib.request.urlopen("http://example.com", timeout=1)
    except Exception:
        pass
    return state
"#;

fn env() -> ProblemEnv {
    let target = ingest_document(
        "# Reef robotics\n\nabstract\n\n## Introduction\ncoral reef monitoring with underwater drones\n\n## Results\nsurvey accuracy improved\n",
        DocumentFormat::MarkdownLike,
    )
    .unwrap();
    ProblemEnv::new(ProblemInstance::from_record(target, ScoreConfig::default()), Embedder::deterministic())
}

fn smoke(expected: Assertion) -> TestSuite {
    TestSuite {
        cases: vec![TestCase {
            name: "case".into(),
            setup: None,
            args: json!({}),
            expected,
        }],
        origin: TestOrigin::Human,
    }
}

#[test]
fn syntax_check_cases() {
    let sb = Sandbox::default();
    match sb.syntax_check(&ToolCode::python("")).unwrap() {
        SyntaxResult::Fail(d) => assert!(d[0].message.contains("no entrypoint")),
        SyntaxResult::Pass => panic!("empty source must fail"),
    }
    match sb.syntax_check(&ToolCode::python("def run(state, args):\n    return (state\n")).unwrap() {
        SyntaxResult::Fail(d) => assert!(d.iter().any(|d| d.line.is_some()), "{d:?}"),
        SyntaxResult::Pass => panic!("unbalanced bracket must fail"),
    }
    assert_eq!(sb.syntax_check(&ToolCode::python(WRITE_INTRO)).unwrap(), SyntaxResult::Pass);
    assert!(matches!(
        sb.syntax_check(&ToolCode { profile: "cobol".into(), ..ToolCode::python(IDENTITY) }),
        Err(SandboxError::ProfileMissing(_))
    ));
}

#[test]
fn fixture_tool_passes_valid_state_and_delta_tests() {
    let env = env();
    let sb = Sandbox::default();
    let code = ToolCode::python(WRITE_INTRO);
    let report = sb.run_tests(&code, &smoke(Assertion::ReturnsValidState), &env.oracle()).unwrap();
    assert!(report.passed(), "{}", report.diagnostics_text());
    let report = sb
        .run_tests(&code, &smoke(Assertion::ScoreDeltaSign(DeltaSign::Positive)), &env.oracle())
        .unwrap();
    assert!(report.passed(), "{}", report.diagnostics_text());
    let report = sb
        .run_tests(&code, &smoke(Assertion::OutputContains("underwater drones".into())), &env.oracle())
        .unwrap();
    assert!(report.passed());
    let report = sb
        .run_tests(
            &code,
            &smoke(Assertion::CustomPredicate("len(state['sections']) == 1".into())),
            &env.oracle(),
        )
        .unwrap();
    assert!(report.passed(), "{}", report.diagnostics_text());
}

#[test]
fn infinite_loop_is_killed_within_limit() {
    let sb = Sandbox::new(
        Limits {
            wall_seconds: 2.0,
            ..Limits::default()
        },
        vec![],
    );
    let start = Instant::now();
    let report = sb
        .run_tests(&ToolCode::python(SPIN), &smoke(Assertion::ReturnsValidState), &SchemaOracle { title: "t".into() })
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(!report.passed());
    assert_eq!(report.tests[0].breach, Some(Breach::WallTime));
    assert!(elapsed < 3.5, "took {elapsed}");
    assert!(report.timings.tests_ms < 3000, "{:?}", report.timings);
}

#[test]
fn network_attempt_is_a_breach() {
    let sb = Sandbox::default();
    let report = sb
        .run_tests(&ToolCode::python(NETWORK), &smoke(Assertion::ReturnsValidState), &SchemaOracle { title: "t".into() })
        .unwrap();
    assert!(!report.passed());
    assert_eq!(report.breaches, vec![Breach::Network]);
}

#[test]
fn dependency_allow_list_rejects_before_execution() {
    let sb = Sandbox::default();
    let code = ToolCode::python("import torch\n\ndef run(state, args):\n    return state\n");
    let report = sb.run_tests(&code, &smoke(Assertion::ReturnsValidState), &SchemaOracle { title: "t".into() }).unwrap();
    assert!(report.rejected.as_deref().unwrap().contains("torch"));
    assert!(report.tests.is_empty());
    let declared = ToolCode {
        dependencies: vec!["requests".into()],
        ..ToolCode::python(IDENTITY)
    };
    assert!(!sb.disallowed_dependencies(&declared).unwrap().is_empty());
    let numpy = ToolCode::python("import numpy as np\n\ndef run(state, args):\n    return state\n");
    assert!(sb.disallowed_dependencies(&numpy).unwrap().is_empty());
}

#[test]
fn auto_generated_smoke_test() {
    let sb = Sandbox::default();
    let code = ToolCode::python(WRITE_INTRO);
    let suite = sb.auto_generate_tests(&code).unwrap();
    assert_eq!(suite.cases.len(), 1);
    assert_eq!(suite.origin, TestOrigin::AutoGenerated);
    let report = sb.run_tests(&code, &suite, &env().oracle()).unwrap();
    assert!(report.passed());
    assert_eq!(
        sb.auto_generate_tests(&ToolCode::python("x = 1\n")),
        Err(SandboxError::EntrypointUndetectable)
    );
}

#[test]
fn autofix_bounds() {
    let env = env();
    let sb = Sandbox::default();
    let tests = smoke(Assertion::ReturnsValidState);
    let broken = ToolCode::python(RAISES);
    let report = sb.run_tests(&broken, &tests, &env.oracle()).unwrap();
    assert!(!report.passed());

    let mut calls = 0;
    let (code, rep) = sb
        .autofix_loop(broken.clone(), report.clone(), &tests, &env.oracle(), 0, &mut |_, _, _| {
            calls += 1;
            Ok(ToolCode::python(IDENTITY))
        })
        .unwrap();
    assert_eq!((calls, rep.fix_attempts), (0, 0));
    assert_eq!(code, broken);

    let mut calls = 0;
    let (_, rep) = sb
        .autofix_loop(broken.clone(), report.clone(), &tests, &env.oracle(), 3, &mut |_, _, attempt| {
            calls += 1;
            Ok(ToolCode::python(if attempt == 2 { IDENTITY } else { RAISES }))
        })
        .unwrap();
    assert_eq!((calls, rep.fix_attempts), (2, 2));
    assert!(rep.passed());

    let mut calls = 0;
    let (_, rep) = sb
        .autofix_loop(broken, report, &tests, &env.oracle(), 3, &mut |c, r, _| {
            calls += 1;
            assert!(r.diagnostics_text().contains("boom"));
            Ok(c.clone())
        })
        .unwrap();
    assert_eq!((calls, rep.fix_attempts), (3, 3));
    assert!(!rep.passed());
}

#[test]
fn apply_tool_steps_and_isolates_failures() {
    let env = env();
    let sb = Sandbox::default();
    let s0 = env.reset();
    let (s1, step) = env
        .apply_tool(&s0, "intro", &ToolCode::python(WRITE_INTRO), &json!({}), &sb)
        .unwrap();
    assert_eq!(s1.revision, 1);
    assert!(step.delta > 0.0, "{step:?}");
    assert_eq!(s0.revision, 0);
    assert!(s0.sections.is_empty());

    let (s2, step) = env.apply_tool(&s1, "id", &ToolCode::python(IDENTITY), &json!({}), &sb).unwrap();
    assert_eq!(step.delta, 0.0);
    assert!(s2.same_content(&s1));

    let err = env.apply_tool(&s1, "bad", &ToolCode::python(RAISES), &json!({}), &sb).unwrap_err();
    assert!(matches!(err, EnvError::ToolExecutionFailed(ref m) if m.contains("boom")), "{err:?}");

    let bad_state = "def run(state, args):\n    state['sections'].append({'path': '7', 'content': 'x'})\n    return state\n";
    let err = env.apply_tool(&s1, "bad", &ToolCode::python(bad_state), &json!({}), &sb).unwrap_err();
    assert!(matches!(err, EnvError::StateSchemaViolation(_)));
}

#[test]
fn scratch_paths_do_not_leak_into_reports() {
    let sb = Sandbox::default();
    let report = sb
        .run_tests(&ToolCode::python(RAISES), &smoke(Assertion::ReturnsValidState), &SchemaOracle { title: "t".into() })
        .unwrap();
    let text = serde_json::to_string(&report).unwrap();
    assert!(!text.contains("/tmp/"), "{text}");
    let again = sb
        .run_tests(&ToolCode::python(RAISES), &smoke(Assertion::ReturnsValidState), &SchemaOracle { title: "t".into() })
        .unwrap();
    assert_eq!(text, serde_json::to_string(&again).unwrap());
}

#[test]
fn state_wire_round_trip() {
    let env = env();
    let s = env.reset();
    let back = DocumentState::from_wire(&s.to_wire()).unwrap();
    assert_eq!(back, s);
}
