use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

use thematic_bench::{corpus, labelled};
use thematic_core::gateway::ScriptedBackend;
use thematic_core::synthetic::Scenario;
use thematic_core::tokens::{pack_items, truncate_to_fit};
use thematic_core::{recall_at_k, HeuristicCounter, RetryPolicy, Run, TokenBudget, WordCounter};

fn packing(c: &mut Criterion) {
    let mut g = c.benchmark_group("pack_items");
    let budget = TokenBudget::new(8192, 2000, 1200, 12).unwrap();
    for n in [100, 1000, 10_000] {
        let docs = corpus(n, 400, 7);
        g.bench_with_input(BenchmarkId::new("heuristic", n), &docs, |b, docs| {
            b.iter(|| pack_items(docs.clone(), &budget, &HeuristicCounter).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("words", n), &docs, |b, docs| {
            b.iter(|| pack_items(docs.clone(), &budget, &WordCounter).unwrap())
        });
    }
    g.finish();
}

fn truncation(c: &mut Criterion) {
    let (_, long) = corpus(1, 20_000, 3).remove(0);
    c.bench_function("truncate_to_fit 20k words to 1000 tokens", |b| {
        b.iter(|| truncate_to_fit(&HeuristicCounter, black_box(&long), 1000).unwrap())
    });
}

fn recall(c: &mut Criterion) {
    let (assignments, gold) = labelled(10_000, 20, 3, 11);
    c.bench_function("recall_at_k 10k points, 20 themes", |b| {
        b.iter(|| recall_at_k(black_box(&assignments), &gold, 3, None).unwrap())
    });
}

fn end_to_end(c: &mut Criterion) {
    let s = Scenario::golden();
    c.bench_function("scripted run, 30 documents", |b| {
        b.iter_batched(
            || tempfile::tempdir().unwrap(),
            |dir| {
                let store = Run::ingest(&dir.path().join("run"), &s.dataset, &s.context, s.settings.clone()).unwrap();
                let backend = Arc::new(ScriptedBackend::new(s.script()));
                let run = Run::open(Arc::new(store), backend, RetryPolicy::immediate()).unwrap();
                run.code(None, None).unwrap();
                run.collate(None).unwrap();
                run.merge(None).unwrap();
                run.approve_themes(None).unwrap();
                run.classify(None, None, false).unwrap();
                dir
            },
            BatchSize::PerIteration,
        )
    });
}

criterion_group!(benches, packing, truncation, recall, end_to_end);
criterion_main!(benches);
