//! Hot-path benchmarks: one joint training step on the tape (forward +
//! backward through ViT, mixture, and router), routing alone, expert
//! merging, and evolutionary search against a synthetic fitness function.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use loramix_bench::BenchModel;
use loramix_core::evo::evolve_with;
use loramix_core::mole::{merge_subnet, MoleCtx};
use loramix_core::tape::Tape;
use loramix_core::vit::{build_forward, Role};
use loramix_core::{MolePath, SearchConfig};

fn bench_tape_step(c: &mut Criterion) {
    let m = BenchModel::new();

    c.bench_function("tape_forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let routed = m
                .router
                .route_on_tape(&mut tape, &m.subnet, &m.space, &m.grouping)
                .unwrap();
            let pid = tape.input(m.patches.clone());
            let ctx = MoleCtx {
                bank: &m.bank,
                mixture: &routed.mixture,
                path: MolePath::Merged,
                train_bank: true,
            };
            let out = build_forward(
                &mut tape,
                &m.weights,
                &m.subnet,
                &m.space,
                pid,
                m.labels.len(),
                Role::Input,
                Some(&ctx),
            )
            .unwrap();
            let loss = tape.cross_entropy(out.logits, &m.labels).unwrap();
            black_box(tape.value(loss).scalar_value())
        })
    });

    c.bench_function("tape_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let routed = m
                .router
                .route_on_tape(&mut tape, &m.subnet, &m.space, &m.grouping)
                .unwrap();
            let pid = tape.input(m.patches.clone());
            let ctx = MoleCtx {
                bank: &m.bank,
                mixture: &routed.mixture,
                path: MolePath::Merged,
                train_bank: true,
            };
            let out = build_forward(
                &mut tape,
                &m.weights,
                &m.subnet,
                &m.space,
                pid,
                m.labels.len(),
                Role::Input,
                Some(&ctx),
            )
            .unwrap();
            let loss = tape.cross_entropy(out.logits, &m.labels).unwrap();
            let grads = tape.backward(loss).unwrap();
            black_box(tape.leaf_grads(&grads).len())
        })
    });
}

fn bench_routing(c: &mut Criterion) {
    let m = BenchModel::new();
    c.bench_function("router_mixture_for", |b| {
        b.iter(|| {
            let mixture = m
                .router
                .mixture_for(&m.subnet, &m.space, &m.grouping)
                .unwrap();
            black_box(mixture)
        })
    });
}

fn bench_merge(c: &mut Criterion) {
    let m = BenchModel::new();
    let mixture = m
        .router
        .mixture_for(&m.subnet, &m.space, &m.grouping)
        .unwrap();
    c.bench_function("merge_subnet", |b| {
        b.iter(|| {
            let (merged, _) =
                merge_subnet(&m.weights, &m.subnet, &m.space, &m.bank, &mixture).unwrap();
            black_box(merged)
        })
    });
}

fn bench_search(c: &mut Criterion) {
    let m = BenchModel::new();
    let cfg = SearchConfig {
        population: 20,
        generations: 10,
        seed: 9,
        ..SearchConfig::default()
    };
    c.bench_function("evolve_synthetic_fitness", |b| {
        b.iter(|| {
            // cheap stand-in for validation loss so the bench isolates the
            // search machinery itself
            let mut eval = |s: &loramix_core::SubnetConfig| {
                let text = s.canonical_text();
                let h = text
                    .bytes()
                    .fold(0u64, |a, x| a.wrapping_mul(131).wrapping_add(x as u64));
                Ok(1.0 + (h % 1000) as f64 / 1000.0)
            };
            let mut log = |_: &loramix_core::evo::SearchTraceRecord| {};
            let ranked = evolve_with(&m.space, &cfg, &mut eval, &mut log).unwrap();
            black_box(ranked.len())
        })
    });
}

criterion_group!(
    benches,
    bench_tape_step,
    bench_routing,
    bench_merge,
    bench_search
);
criterion_main!(benches);
