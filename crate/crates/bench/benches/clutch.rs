use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clutch_core::baselines::{linear_update, linucb_select, LinearBanditState};
use clutch_core::ir::{apply_mutation, execute, generate_seed, DonorPool, MutationKind, DEFAULT_MAX_LEN};
use clutch_core::model::{ArmRound, ClutchAgent, ClutchConfig, DropoutNoise, InputSpec};
use clutch_core::reward::CoverageStats;

fn dense_round(rng: &mut ChaCha8Rng, arms: usize) -> ArmRound {
    let ctx = Array2::from_shape_simple_fn((arms, 2), || rng.random::<f64>());
    ArmRound::dense(ctx, 4.min(arms)).unwrap()
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    let agent = ClutchAgent::new(InputSpec::Dense { feature_dim: 2 }, ClutchConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for arms in [8, 64, 512] {
        let round = dense_round(&mut rng, arms);
        let noise = DropoutNoise::sample(&agent.model, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(arms), &round, |b, round| {
            b.iter(|| agent.model.decide(black_box(round), &noise).unwrap())
        });
    }
    group.finish();
}

fn update(c: &mut Criterion) {
    let config = ClutchConfig {
        update_step: 32,
        ..ClutchConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rounds: Vec<ArmRound> = (0..32).map(|_| dense_round(&mut rng, 20)).collect();
    c.bench_function("update/32x20_arms", |b| {
        b.iter_batched(
            || ClutchAgent::new(InputSpec::Dense { feature_dim: 2 }, config.clone()).unwrap(),
            |mut agent| {
                for round in &rounds {
                    let d = agent.decide(round.clone()).unwrap();
                    agent.observe(vec![0.5; d.selected.len()]).unwrap();
                }
                agent
            },
            criterion::BatchSize::LargeInput,
        )
    });
}

fn interpreter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let programs: Vec<_> = (0..64).map(|_| generate_seed(&mut rng, 24)).collect();
    c.bench_function("execute/64_seeds", |b| {
        b.iter(|| programs.iter().map(|p| execute(black_box(p)).cc).sum::<u32>())
    });
    let donors = DonorPool::new(16);
    c.bench_function("mutate_and_execute", |b| {
        b.iter(|| {
            let p = &programs[rng.random_range(0..programs.len())];
            let kind = MutationKind::ALL[rng.random_range(0..6)];
            let loc = rng.random_range(0..p.len());
            let m = apply_mutation(p, kind, &[loc], &donors, DEFAULT_MAX_LEN, &mut rng).unwrap();
            execute(&m).outcome
        })
    });
}

fn baselines(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut state = LinearBanditState::new(80, 1.0).unwrap();
    let ctx = Array2::from_shape_simple_fn((20, 80), || rng.random_range(-0.1..0.1));
    linear_update(&mut state, &ctx, &[0.1; 20]).unwrap();
    c.bench_function("linucb_select/d80_20_arms", |b| {
        b.iter(|| linucb_select(&state, black_box(&ctx), 4, 1.0).unwrap())
    });
    let mut stats = CoverageStats::new(104);
    let counts = ndarray::Array1::from_shape_fn(104, |i| (i % 7) as f64);
    c.bench_function("variance_update/104", |b| {
        b.iter(|| stats.update_variance(counts.view()).unwrap())
    });
}

criterion_group!(benches, forward, update, interpreter, baselines);
criterion_main!(benches);
