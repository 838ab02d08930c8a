use super::*;
use crate::embedding::Embedder;
use crate::sandbox::{PhaseTimings, SyntaxResult, TestOutcome};

fn report(passed: bool) -> ExecutionReport {
    ExecutionReport {
        syntax: SyntaxResult::Pass,
        tests: vec![TestOutcome {
            name: "smoke".into(),
            passed,
            failure: (!passed).then(|| "ValueError: boom".to_string()),
            breach: None,
            output: String::new(),
            wall_ms: 0,
        }],
        breaches: vec![],
        fix_attempts: 0,
        rejected: None,
        timings: PhaseTimings::default(),
    }
}

fn item(id: &str, source: FeedbackSource, polarity: Polarity, text: &str, at: u64) -> FeedbackItem {
    FeedbackItem {
        id: id.into(),
        source,
        kind: FeedbackKind::Corrective,
        polarity,
        agent: AgentKind::Coder,
        text: text.into(),
        created_at: at,
        embedding: None,
        pinned: false,
    }
}

const SPEC_ANSWER: &str = "Here is my proposal.\n```toolspec\nname: intro_writer\npurpose: write an introduction section\ninput: empty plan\noutput: plan with Introduction and its content\ntests: adds one section; keeps title\nnovelty: new\n```\n";

fn spec() -> ToolSpec {
    parse_tool_spec(SPEC_ANSWER).unwrap()
}

#[test]
fn temperature_schedule_examples() {
    assert_eq!(temperature_schedule(1, 0.0, 1.3).unwrap(), vec![0.5]);
    assert_eq!(temperature_schedule(2, 0.0, 1.3).unwrap(), vec![0.0, 1.3]);
    let four = temperature_schedule(4, 0.0, 1.3).unwrap();
    for (got, want) in four.iter().zip([0.0, 0.4333, 0.8667, 1.3]) {
        assert!((got - want).abs() < 1e-4, "{four:?}");
    }
    assert!(matches!(temperature_schedule(0, 0.0, 1.0), Err(AgentError::InvalidRange { .. })));
    assert!(matches!(temperature_schedule(2, 1.0, 0.5), Err(AgentError::InvalidRange { .. })));
    assert!(matches!(temperature_schedule(2, -0.1, 0.5), Err(AgentError::InvalidRange { .. })));
}

#[test]
fn prompt_has_five_ordered_segments_and_is_deterministic() {
    let agent = AgentSpec::default_for(AgentKind::Coder);
    let a = build_rdp_prompt(&agent, "obs", "task", &[], &[], None).unwrap();
    let b = build_rdp_prompt(&agent, "obs", "task", &[], &[], None).unwrap();
    assert_eq!(a, b);
    let segments = PromptBundle::split_rendered(&a.rendered).unwrap();
    assert_eq!(segments.iter().map(|s| s.0).collect::<Vec<_>>(), SegmentKind::ORDER);
    assert_eq!(segments[4].1, EMPTY_SEGMENT);
    assert_eq!(segments[1].1, "obs");
}

#[test]
fn macro_and_micro_feedback_are_segregated() {
    let agent = AgentSpec::default_for(AgentKind::Coder);
    let feedback = vec![
        item("m", FeedbackSource::AutomaticMacro, Polarity::Neutral, "score total=42.00", 1),
        item("h", FeedbackSource::Human, Polarity::Negative, "add a conclusion section", 2),
    ];
    let p = build_rdp_prompt(&agent, "obs", "task", &[], &feedback, None).unwrap();
    let segs = PromptBundle::split_rendered(&p.rendered).unwrap();
    assert!(segs[1].1.contains("score total=42.00"));
    assert!(!segs[4].1.contains("score total=42.00"));
    assert!(segs[4].1.contains("add a conclusion section"));
    assert!(!segs[1].1.contains("add a conclusion section"));
}

#[test]
fn overflow_truncates_examples_then_oldest_feedback() {
    let agent = AgentSpec::default_for(AgentKind::Coder);
    let examples = vec!["x ".repeat(400), "y ".repeat(400)];
    let feedback = vec![
        item("old", FeedbackSource::Human, Polarity::Negative, &"old ".repeat(50), 1),
        item("new", FeedbackSource::Human, Polarity::Negative, "newest note", 5),
    ];
    let full = build_rdp_prompt(&agent, "obs", "task", &examples, &feedback, None).unwrap();
    let no_examples = build_rdp_prompt(&agent, "obs", "task", &[], &feedback, None).unwrap();
    let p = build_rdp_prompt(&agent, "obs", "task", &examples, &feedback, Some(no_examples.token_estimate)).unwrap();
    assert!(p.token_estimate < full.token_estimate);
    assert_eq!(p.examples, "");
    assert!(p.feedbacks.contains("old old"));

    let p = build_rdp_prompt(&agent, "obs", "task", &examples, &feedback, Some(no_examples.token_estimate - 10)).unwrap();
    assert!(!p.feedbacks.contains("old old"));
    assert!(p.feedbacks.contains("newest note"));
    assert!(p.task.contains("task"));

    assert!(matches!(
        build_rdp_prompt(&agent, "obs", "task", &examples, &feedback, Some(5)),
        Err(AgentError::SegmentOverflow { .. })
    ));
}

#[test]
fn select_feedback_trivial_cases() {
    let pool = vec![
        item("a", FeedbackSource::Human, Polarity::Positive, "a", 1),
        item("b", FeedbackSource::Human, Polarity::Negative, "b", 2),
    ];
    assert!(select_feedback(&pool, FeedbackPolicy::default(), 0).is_empty());
    let got = select_feedback(&pool, FeedbackPolicy::default(), 5);
    assert_eq!(got.iter().map(|f| f.id.as_str()).collect::<Vec<_>>(), ["b", "a"]);
    assert_eq!(pool.len(), 2);
}

#[test]
fn polarity_balance_swaps_in_a_negative() {
    let mut pool: Vec<FeedbackItem> = (0..5)
        .map(|i| item(&format!("p{i}"), FeedbackSource::Human, Polarity::Positive, "fine", i))
        .collect();
    pool[0].polarity = Polarity::Negative;
    let got = select_feedback(&pool, FeedbackPolicy::default(), 3);
    assert_eq!(got.len(), 3);
    assert!(got.iter().any(|f| f.polarity == Polarity::Negative));
    assert!(got.iter().any(|f| f.polarity == Polarity::Positive));
    let unbalanced = FeedbackPolicy {
        balance_polarity: false,
        ..FeedbackPolicy::default()
    };
    assert!(select_feedback(&pool, unbalanced, 3).iter().all(|f| f.polarity == Polarity::Positive));
}

#[test]
fn pinned_items_come_first() {
    let mut pool: Vec<FeedbackItem> = (0..4)
        .map(|i| item(&format!("f{i}"), FeedbackSource::Human, Polarity::Neutral, "x", i))
        .collect();
    pool[0].pinned = true;
    let got = select_feedback(&pool, FeedbackPolicy::default(), 2);
    assert_eq!(got[0].id, "f0");
    assert_eq!(got[1].id, "f3");
}

/// Reference greedy max-min written directly over embedding values.
fn reference_greedy(vectors: &[Vec<f64>], order: &[usize], budget: usize) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot / (na * nb)).max(0.0)
    };
    let mut chosen = vec![order[0]];
    while chosen.len() < budget.min(order.len()) {
        let mut best: Option<(usize, f64)> = None;
        for &c in order {
            if chosen.contains(&c) {
                continue;
            }
            let d = chosen.iter().map(|&s| 1.0 - cos(&vectors[c], &vectors[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((c, d));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

#[test]
fn diversity_matches_reference_greedy() {
    let embedder = Embedder::deterministic();
    let texts = [
        "add more references to the survey",
        "add more references please",
        "the introduction is too short",
        "write a longer introduction",
        "plan misses a results section",
        "coverage of the methods section is low",
        "references are duplicated",
        "conclusion section missing",
        "the methods section needs detail",
        "great improvement on the plan",
    ];
    let pool: Vec<FeedbackItem> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| FeedbackItem {
            embedding: Some(embedder.embed_text(t).unwrap()),
            ..item(&format!("f{i}"), FeedbackSource::Human, Polarity::Neutral, t, i as u64)
        })
        .collect();
    let policy = FeedbackPolicy {
        strategy: SelectionStrategy::Diversity,
        balance_polarity: false,
    };
    let got: Vec<String> = select_feedback(&pool, policy, 4).into_iter().map(|f| f.id).collect();
    let vectors: Vec<Vec<f64>> = pool.iter().map(|f| f.embedding.clone().unwrap().values).collect();
    let order: Vec<usize> = (0..10).rev().collect();
    let want: Vec<String> = reference_greedy(&vectors, &order, 4).into_iter().map(|i| format!("f{i}")).collect();
    assert_eq!(got, want);
}

fn scripted(entries: &[(AgentKind, u64, &[&str])]) -> ScriptedBackend {
    let mut script = ReplayScript::default();
    for (agent, step, responses) in entries {
        script.push(*agent, *step, responses.iter().map(|s| s.to_string()).collect());
    }
    ScriptedBackend::new("scripted", script)
}

#[test]
fn scripted_candidates_in_order_and_atomic_failure() {
    let backend = scripted(&[(AgentKind::Coder, 0, &["a", "b", "c"]), (AgentKind::Coder, 1, &["only"])]);
    let agent = AgentSpec::default_for(AgentKind::Coder);
    let prompt = build_rdp_prompt(&agent, "o", "t", &[], &[], None).unwrap();
    let got = generate_candidates(&agent, &prompt, &backend, 0).unwrap();
    assert_eq!(got.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
    assert_eq!(got.iter().map(|c| c.temperature).collect::<Vec<_>>(), [0.0, 0.65, 1.3]);
    assert!(matches!(
        generate_candidates(&agent, &prompt, &backend, 1),
        Err(AgentError::ReplayExhausted { step: 1, candidate: 1, .. })
    ));
    let single = AgentSpec {
        candidates: 1,
        ..agent
    };
    let got = generate_candidates(&single, &prompt, &backend, 1).unwrap();
    assert_eq!((got.len(), got[0].temperature), (1, 0.5));
}

#[test]
fn coach_parses_and_sees_coverage() {
    let backend = scripted(&[(AgentKind::Coach, 0, &[SPEC_ANSWER, "no idea"]), (AgentKind::Coach, 1, &["garbage", "more garbage"])]);
    let coach = AgentSpec::default_for(AgentKind::Coach);
    let proposals = coach_propose("score: coverage=0.125", "0 validated, 0 too_hard", &coach, &backend, 0, &[]).unwrap();
    assert_eq!(proposals[0].spec.as_ref().unwrap().novelty, Novelty::New);
    assert_eq!(proposals[0].spec.as_ref().unwrap().test_plan.len(), 2);
    assert!(proposals[1].spec.is_none() && proposals[1].parse_error.is_some());
    assert!(backend.requests()[0].prompt.contains("coverage=0.125"));
    assert!(matches!(
        coach_propose("o", "", &coach, &backend, 1, &[]),
        Err(AgentError::AllCandidatesUnparseable(_))
    ));
    let coder = AgentSpec::default_for(AgentKind::Coder);
    assert!(matches!(coach_propose("o", "", &coder, &backend, 0, &[]), Err(AgentError::WrongAgent { .. })));
}

#[test]
fn tool_spec_parser_is_strict() {
    assert!(parse_tool_spec("name: x\npurpose: y\nnovelty: new").is_err());
    assert!(parse_tool_spec("```toolspec\nname: x\nnovelty: new\n```").unwrap_err().contains("purpose"));
    assert!(parse_tool_spec("```toolspec\nname: x\npurpose: y\nnovelty: odd\n```").is_err());
}

#[test]
fn code_extraction() {
    let code = parse_code("Sure:\n```python\ndef run(state, args):\n    return state\n```\n").unwrap();
    assert!(code.source.starts_with("def run"));
    assert!(parse_code("def run(state, args):\n    return state\n").is_some());
    assert!(parse_code("I cannot do that").is_none());
}

#[test]
fn critic_gates() {
    let critic = AgentSpec::default_for(AgentKind::Critic);
    let code = ToolCode::python("def run(state, args):\n    return state\n");
    let backend = scripted(&[
        (AgentKind::Critic, 0, &["VERDICT: accept"]),
        (AgentKind::Critic, 1, &["VERDICT: accept\nINSTRUCTIONS: none"]),
        (AgentKind::Critic, 2, &["VERDICT: retry\nINSTRUCTIONS: add the missing sections"]),
        (AgentKind::Critic, 3, &["VERDICT: retry"]),
    ]);
    let v = critic_evaluate(&spec(), &code, &report(false), Some(1.0), 2, &critic, &backend, 0).unwrap();
    assert!(matches!(v, Verdict::Retry { ref instructions } if instructions.contains("boom")));
    let v = critic_evaluate(&spec(), &code, &report(true), Some(3.2), 2, &critic, &backend, 1).unwrap();
    assert_eq!(v, Verdict::Accept);
    let v = critic_evaluate(&spec(), &code, &report(true), Some(-1.5), 2, &critic, &backend, 2).unwrap();
    assert!(matches!(v, Verdict::Retry { ref instructions } if instructions.contains("missing sections")));
    let v = critic_evaluate(&spec(), &code, &report(true), Some(0.0), 0, &critic, &backend, 3).unwrap();
    assert!(matches!(v, Verdict::TooHard { .. }));
    assert_eq!(critic_decide("too_hard", "", &report(true), None, 2).label(), "retry");
    assert_eq!(critic_decide("accept", "", &report(true), None, 0), Verdict::Accept);
}

#[test]
fn capitalizer_status_and_description() {
    let cap = AgentSpec::default_for(AgentKind::Capitalizer);
    let code = ToolCode::python("def run(state, args):\n    return state\n");
    let backend = scripted(&[
        (AgentKind::Capitalizer, 0, &["DESCRIPTION: writes an introduction section for the document\nUSAGE: run(state, {})"]),
        (AgentKind::Capitalizer, 1, &["nothing useful"]),
    ]);
    let suite = TestSuite { cases: vec![], origin: crate::sandbox::TestOrigin::AutoGenerated };
    let r = capitalizer_summarize(&spec(), &code, &suite, &report(true), &Verdict::Accept, ToolMetrics::default(), Provenance::default(), &cap, &backend, 0).unwrap();
    assert_eq!(r.status, ToolStatus::Validated);
    assert_eq!(r.usage, "run(state, {})");
    let hard = Verdict::TooHard { reason: "r".into() };
    let r2 = capitalizer_summarize(&spec(), &code, &suite, &report(false), &hard, ToolMetrics::default(), Provenance::default(), &cap, &backend, 1).unwrap();
    assert_eq!(r2.status, ToolStatus::TooHard);
    assert_eq!(r2.description, spec().purpose);

    let e = Embedder::deterministic();
    let related = e.text_similarity(&r.description, &spec().purpose).unwrap();
    let unrelated = e.text_similarity(&r.description, "quarterly tax filing deadlines").unwrap();
    assert!(related > unrelated, "{related} vs {unrelated}");
}
