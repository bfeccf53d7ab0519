use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hvrp_bench::{instances, model, step_config};
use hvrp_core::baselines::{clarke_wright, exact_oracle, nearest_neighbor, ORACLE_LIMIT};
use hvrp_core::decoder::{rollout_batch, DecodePolicy};
use hvrp_core::encoder::{encode_batch, BnMode};
use hvrp_core::model::Ablation;
use hvrp_core::tensor::Graph;
use hvrp_core::trainer::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn encode(c: &mut Criterion) {
    let insts = instances(20, 64, 0);
    let mut group = c.benchmark_group("encode");
    for ablation in [Ablation::None, Ablation::NoHypergraph] {
        let m = model(128, ablation);
        group.bench_with_input(BenchmarkId::from_parameter(ablation.as_str()), &m, |b, m| {
            b.iter(|| {
                let mut g = Graph::new();
                encode_batch(&mut g, m, &insts, BnMode::Eval, false).unwrap().h
            })
        });
    }
    group.finish();
}

fn rollout(c: &mut Criterion) {
    let insts = instances(20, 64, 0);
    let m = model(128, Ablation::None);
    let mut group = c.benchmark_group("rollout");
    group.sample_size(20);
    group.bench_function("greedy", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let enc = encode_batch(&mut g, &m, &insts, BnMode::Eval, false).unwrap();
            rollout_batch(&mut g, &m, &enc, &insts, DecodePolicy::Greedy, false).unwrap().solutions.len()
        })
    });
    group.bench_function("sample", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter(|| {
            let mut g = Graph::new();
            let enc = encode_batch(&mut g, &m, &insts, BnMode::Train, false).unwrap();
            rollout_batch(&mut g, &m, &enc, &insts, DecodePolicy::Sample(&mut rng), false).unwrap().solutions.len()
        })
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for batch in [16, 64] {
        group.bench_with_input(BenchmarkId::from_parameter(batch), &batch, |b, &batch| {
            b.iter_batched(
                || Trainer::new(step_config(batch)).unwrap(),
                |mut t| t.train_epoch(None).unwrap().mean_actor_cost,
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn baselines(c: &mut Criterion) {
    let insts = instances(20, 16, 7);
    let mut group = c.benchmark_group("baselines");
    group.bench_function("nearest_neighbor", |b| b.iter(|| insts.iter().map(|i| nearest_neighbor(i).cost).sum::<f64>()));
    group.bench_function("clarke_wright", |b| b.iter(|| insts.iter().map(|i| clarke_wright(i).cost).sum::<f64>()));
    for n in [6, 8] {
        let small = instances(n, 4, 11);
        group.bench_with_input(BenchmarkId::new("oracle", n), &small, |b, small| {
            b.iter(|| small.iter().map(|i| exact_oracle(i, ORACLE_LIMIT).unwrap().cost).sum::<f64>())
        });
    }
    group.finish();
}

criterion_group!(benches, encode, rollout, train_step, baselines);
criterion_main!(benches);
