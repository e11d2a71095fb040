use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nrit_core::attribution::{
    attribute_instance, decouple, mine_candidates, AttributionMatrix, IgConfig, IgInput, MiningConfig,
};
use nrit_core::model::{MicroTransformer, ModelConfig, TokenId, NO};
use nrit_core::tensor::matmul;
use nrit_core::tuning::{train, Stage, TrainConfig, TrainExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 690;

fn model() -> MicroTransformer {
    MicroTransformer::new(ModelConfig::desk(VOCAB)).unwrap()
}

fn tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(8..VOCAB)).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a: Vec<f64> = (0..128 * 64).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..64 * 128).map(|_| rng.random()).collect();
    c.bench_function("matmul 128x64x128", |bench| bench.iter(|| matmul(128, 64, 128, black_box(&a), black_box(&b))));
}

fn bench_forward(c: &mut Criterion) {
    let m = model();
    let seq = tokens(&mut ChaCha8Rng::seed_from_u64(1), 128);
    c.bench_function("forward 128 tokens", |bench| bench.iter(|| m.forward(black_box(&seq), &mut []).unwrap()));
}

fn bench_ig(c: &mut Criterion) {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let query = tokens(&mut rng, 12);
    let mut target_prompt = tokens(&mut rng, 60);
    target_prompt.extend(&query);
    let input = IgInput {
        id: "bench".into(),
        target_prompt,
        baseline_prompt: query,
        gold: NO,
    };
    let cfg = IgConfig::default();
    let mut group = c.benchmark_group("ig");
    group.sample_size(10);
    group.bench_function("one instance, 20 steps, all layers", |bench| {
        bench.iter(|| attribute_instance(&m, black_box(&input), &cfg).unwrap())
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let examples: Vec<TrainExample> = (0..4)
        .map(|_| TrainExample {
            tokens: tokens(&mut rng, 96),
            loss_from: 80,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::defaults(Stage::NoiseFilter)
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one batch of 4, 96 tokens", |bench| {
        bench.iter(|| train(&mut m, black_box(&examples), None, &cfg).unwrap())
    });
    group.finish();
}

fn bench_mining(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (layers, d_ff, n) = (6, 128, 400);
    let mut matrix = AttributionMatrix::new(layers, d_ff);
    for i in 0..n {
        matrix.push(format!("i{i}"), (0..layers * d_ff).map(|_| rng.random::<f64>() - 0.3).collect()).unwrap();
    }
    let rel: Vec<usize> = (0..n / 2).collect();
    let irrel: Vec<usize> = (n / 2..n).collect();
    let cfg = MiningConfig::default();
    c.bench_function("mine and decouple 400 instances", |bench| {
        bench.iter(|| {
            let r = mine_candidates(&matrix, &rel, &cfg).unwrap();
            let i = mine_candidates(&matrix, &irrel, &cfg).unwrap();
            decouple(&r, &i)
        })
    });
}

criterion_group!(benches, bench_matmul, bench_forward, bench_ig, bench_train_step, bench_mining);
criterion_main!(benches);
