use std::collections::HashSet;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use iclrec::clustering::{estep, kmeans_fit};
use iclrec::data::split_leave_one_out;
use iclrec::encoder::{encode, EncoderParams, Mode};
use iclrec::eval::{evaluate, rank_from_scores, Phase};
use iclrec::optim::AdamState;
use iclrec::synthetic::{generate, SyntheticConfig};
use iclrec::trainer::{epoch_batches, mstep_batch, padded_train_seqs, TrainConfig};
use iclrec::{Matrix, SplitDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (SplitDataset, TrainConfig, EncoderParams) {
    let corpus = generate(&SyntheticConfig::default()).unwrap();
    let split = split_leave_one_out(&corpus.dataset);
    let mut cfg = TrainConfig::new(split.vocab_size);
    cfg.encoder.dim = 32;
    cfg.encoder.max_len = 20;
    cfg.k = 4;
    cfg.batch_size = 32;
    let params = EncoderParams::init(&cfg.encoder, 1).unwrap();
    (split, cfg, params)
}

fn bench_encoder(c: &mut Criterion) {
    let (split, cfg, params) = setup();
    let seqs = padded_train_seqs(&split, cfg.encoder.max_len);
    c.bench_function("encode_eval_one_sequence", |b| {
        b.iter(|| encode(&params, black_box(&seqs[0]), Mode::Eval, 0).unwrap())
    });
    c.bench_function("encode_train_one_sequence", |b| {
        b.iter(|| encode(&params, black_box(&seqs[0]), Mode::Train, 7).unwrap())
    });
}

fn bench_training(c: &mut Criterion) {
    let (split, cfg, params) = setup();
    let seqs = padded_train_seqs(&split, cfg.encoder.max_len);
    let intents = estep(&params, &seqs, cfg.k, cfg.kmeans_max_iter, 3).unwrap();
    let batch = epoch_batches(split.len(), cfg.batch_size, cfg.seed, 0).swap_remove(0);
    let mut group = c.benchmark_group("mstep");
    group.sample_size(10);
    for (name, lambda, beta) in [("next_only", 0.0, 0.0), ("full", cfg.lambda, cfg.beta)] {
        let mut run = cfg.clone();
        run.lambda = lambda;
        run.beta = beta;
        group.bench_function(name, |b| {
            b.iter_batched(
                || (params.clone(), AdamState::new(&params.tensors)),
                |(mut p, mut s)| mstep_batch(&mut p, &mut s, &split, &batch, Some(&intents), &run, 0).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.bench_function("estep", |b| {
        b.iter(|| estep(&params, &seqs, cfg.k, cfg.kmeans_max_iter, 3).unwrap())
    });
    group.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<f64> = (0..2000 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let points = Matrix::from_vec(2000, 64, data);
    c.bench_function("kmeans_2000x64_k32", |b| b.iter(|| kmeans_fit(black_box(&points), 32, 20, 1).unwrap()));
}

fn bench_ranking(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores: Vec<f64> = (0..12_000).map(|_| rng.gen()).collect();
    let exclude: HashSet<usize> = (1..50).map(|i| i * 200).collect();
    c.bench_function("rank_12000_items", |b| {
        b.iter(|| rank_from_scores(black_box(&scores), 7, &exclude).unwrap())
    });
    let (split, cfg, params) = setup();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("test_phase_400_users", |b| {
        b.iter(|| evaluate(&params, &split, Phase::Test, &cfg.eval_options()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_encoder, bench_training, bench_kmeans, bench_ranking);
criterion_main!(benches);
