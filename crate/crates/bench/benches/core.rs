use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use toolforge_bench::{interventions, rng};
use toolforge_core::agents::{AgentKind, AgentSpec};
use toolforge_core::embedding::Embedder;
use toolforge_core::fixtures::{sample_problems, scripted_config, ScriptBuilder};
use toolforge_core::hitl::select_interventions;
use toolforge_core::orchestrator::{replay, run_session, Runtime};
use toolforge_core::scoring::{align_plans, compute_score, ScoreConfig};
use toolforge_core::synthetic::{perturb, random_plan, synthetic_corpus};

fn scoring(c: &mut Criterion) {
    let embedder = Embedder::deterministic();
    let corpus = synthetic_corpus(2, 1);
    let mut r = rng(2);
    let pairs: Vec<_> = corpus.iter().map(|t| (perturb(t, &mut r), t.clone())).collect();
    c.bench_function("compute_score/6 pairs", |b| {
        b.iter(|| {
            for (g, t) in &pairs {
                black_box(compute_score(g, t, &ScoreConfig::default(), &embedder).unwrap());
            }
        })
    });
    let mut group = c.benchmark_group("align_plans");
    for n in [4, 16, 64] {
        let g = random_plan(&mut r, n);
        let t = random_plan(&mut r, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(align_plans(&g, &t, &embedder).unwrap()))
        });
    }
    group.finish();
}

fn knapsack(c: &mut Criterion) {
    let agents: Vec<AgentSpec> = AgentKind::ALL.into_iter().map(AgentSpec::default_for).collect();
    let mut group = c.benchmark_group("select_interventions");
    // 20 is the last exhaustive size; larger instances go through branch and bound.
    for n in [8, 16, 20, 32, 48] {
        let items = interventions(n, n as u64);
        let budget: f64 = items.iter().map(|i| i.time_cost).sum::<f64>() / 3.0;
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(select_interventions(&items, budget, &agents).unwrap()))
        });
    }
    group.finish();
}

fn sessions(c: &mut Criterion) {
    let mut script = ScriptBuilder::new();
    for i in 0..3 {
        script.clean_iteration(&format!("add_intro_{i}"));
    }
    let config = scripted_config(script.build(), 3);
    let (_, events) = run_session(config.clone(), sample_problems(), Runtime::from_config(&config)).unwrap();
    c.bench_function("replay/3 iterations", |b| b.iter(|| black_box(replay(&events).unwrap())));
    let mut group = c.benchmark_group("session");
    group.sample_size(10);
    group.bench_function("3 scripted iterations", |b| {
        b.iter(|| run_session(config.clone(), sample_problems(), Runtime::from_config(&config)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, scoring, knapsack, sessions);
criterion_main!(benches);
