use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use emotts_core::datasets::{generate_synthetic_corpus, MelSpectrogram};
use emotts_core::evaluation::{dtw_align, mcd, DEFAULT_ORDER};
use emotts_core::mine::MiEstimator;
use emotts_core::training::{run_training, TrainConfig, Trainer};
use emotts_core::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn metrics(c: &mut Criterion) {
    let a = Tensor::randn(120, 20, 1.0, &mut rng(1));
    let b = Tensor::randn(100, 20, 1.0, &mut rng(2));
    c.bench_function("dtw_120x100", |bch| bch.iter(|| dtw_align(&a, &b).unwrap()));
    let (ma, mb) = (
        MelSpectrogram::new(a.clone()),
        MelSpectrogram::new(b.clone()),
    );
    c.bench_function("mcd_120x100", |bch| {
        bch.iter(|| mcd(&ma, &mb, DEFAULT_ORDER).unwrap())
    });
}

fn mine(c: &mut Criterion) {
    let y = Tensor::randn(16, 32, 1.0, &mut rng(3));
    let z = Tensor::randn(16, 32, 1.0, &mut rng(4));
    c.bench_function("mine_update_b16_d32", |bch| {
        bch.iter_batched(
            || MiEstimator::new(32, 32, 128, 1e-4, 5),
            |mut est| est.update(&y, &z, 6).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn model(c: &mut Criterion) {
    let mut config = TrainConfig::desk();
    config.data.n_utterances = 200;
    config.total_steps = 1;
    config.eval_every = 0;
    let corpus = generate_synthetic_corpus(&config.data.synthetic_spec()).unwrap();
    let stage1 = run_training(config.clone(), &corpus, None, None)
        .unwrap()
        .checkpoint;

    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("stage1_step_b16", |bch| {
        bch.iter_batched(
            || Trainer::new(config.clone(), &corpus, None).unwrap(),
            |mut t| t.next_step().unwrap(),
            BatchSize::LargeInput,
        )
    });
    let mut c2 = config.clone();
    c2.stage = 2;
    group.bench_function("stage2_step_b16", |bch| {
        bch.iter_batched(
            || Trainer::new(c2.clone(), &corpus, Some(&stage1)).unwrap(),
            |mut t| t.next_step().unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();

    let t = Trainer::new(c2, &corpus, Some(&stage1)).unwrap();
    let item = &corpus[1];
    c.bench_function("synthesize_one", |bch| {
        bch.iter(|| {
            let mut g = Graph::new(&t.store).with_constant_params();
            t.model
                .synthesize(&mut g, &item.phoneme_ids, &item.mel.values)
                .unwrap()
        })
    });
}

criterion_group!(benches, metrics, mine, model);
criterion_main!(benches);
