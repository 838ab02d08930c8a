use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toolforge_core::agents::{AgentKind, AgentSpec};
use toolforge_core::embedding::Embedder;
use toolforge_core::hitl::{select_interventions, select_interventions_bnb, InterventionCandidate, Phase};
use toolforge_core::orchestrator::{parse_jsonl, to_jsonl, verify_chain, EventKind, EventLog};
use toolforge_core::scoring::{align_matrix, compute_score, ScoreConfig};
use toolforge_core::synthetic::{perturb, synthetic_corpus};

fn candidate() -> impl Strategy<Value = (usize, u8, u8, bool, u8, bool)> {
    (0..4usize, 0..8u8, 1..6u8, any::<bool>(), 0..3u8, prop::bool::weighted(0.85))
}

fn build(raw: Vec<(usize, u8, u8, bool, u8, bool)>) -> Vec<InterventionCandidate> {
    raw.into_iter()
        .enumerate()
        .map(|(index, (agent, s, t, pre, rel, triggered))| InterventionCandidate {
            index,
            agent: AgentKind::ALL[agent],
            phase: if pre { Phase::PreInference } else { Phase::PostInference },
            benefit: s as f64 * 0.5,
            time_cost: t as f64 * 10.0,
            triggered,
            reliability_after: [0.5, 0.8, 0.95][rel as usize],
        })
        .collect()
}

fn agents(weak: [bool; 4]) -> Vec<AgentSpec> {
    AgentKind::ALL
        .into_iter()
        .zip(weak)
        .map(|(k, w)| {
            let mut a = AgentSpec::default_for(k);
            a.risk_threshold = 0.7;
            a.reliability = if w { 0.4 } else { 0.9 };
            a
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn branch_and_bound_matches_enumeration(
        raw in prop::collection::vec(candidate(), 0..14),
        weak in prop::array::uniform4(prop::bool::weighted(0.25)),
        budget in 0u32..250,
    ) {
        let c = build(raw);
        let a = agents(weak);
        let exact = select_interventions(&c, budget as f64, &a).unwrap();
        let bnb = select_interventions_bnb(&c, budget as f64, &a).unwrap();
        prop_assert_eq!(&exact.selected, &bnb.selected);
        prop_assert_eq!(exact.feasibility, bnb.feasibility);
        prop_assert!(exact.time_used <= budget as f64 + 1e-9);
    }

    #[test]
    fn alignment_is_bounded_by_the_smaller_side(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 0..7), 0..7),
    ) {
        let width = rows.first().map_or(0, Vec::len);
        let sim: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let (value, pairs) = align_matrix(&sim);
        prop_assert!(value <= sim.len().min(width) as f64 + 1e-12);
        prop_assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        let sum: f64 = pairs.iter().map(|&(i, j)| sim[i][j]).sum();
        prop_assert!((sum - value).abs() < 1e-9);
    }

    #[test]
    fn scores_stay_in_range(seed in any::<u64>()) {
        let embedder = Embedder::deterministic();
        let corpus = synthetic_corpus(1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for target in &corpus {
            let g = perturb(target, &mut rng);
            let s = compute_score(&g, target, &ScoreConfig::default(), &embedder).unwrap();
            prop_assert!((0.0..=100.0).contains(&s.total));
        }
    }

    #[test]
    fn event_logs_round_trip_and_detect_edits(
        payloads in prop::collection::vec(any::<i64>(), 1..20),
        victim in any::<prop::sample::Index>(),
    ) {
        let log = EventLog::new();
        for p in &payloads {
            log.append(EventKind::FeedbackRecorded, serde_json::json!({ "n": p }), serde_json::Value::Null);
        }
        let events = log.snapshot();
        let parsed = parse_jsonl(&to_jsonl(&events)).unwrap();
        prop_assert_eq!(&parsed, &events);
        prop_assert!(verify_chain(&parsed).is_ok());
        let mut edited = parsed;
        let i = victim.index(edited.len());
        edited[i].payload = serde_json::json!({ "n": "edited" });
        prop_assert_eq!(verify_chain(&edited), Err(i as u64));
    }
}
