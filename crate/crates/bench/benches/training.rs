use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use tcl_core::evaluation::retrieval_from_similarity;
use tcl_core::objectives::{infonce, ContrastiveBatch};
use tcl_core::seed;
use tcl_core::training::{TrainConfig, Trainer};
use tcl_core::Tensor;

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, cfg) in [("micro", TrainConfig::micro()), ("desk", TrainConfig::default())] {
        let trainer = Trainer::new(cfg).expect("trainer");
        group.bench_function(name, |b| {
            b.iter_batched(
                || Trainer::from_checkpoint(&trainer.checkpoint()).expect("restore"),
                |mut t| t.step().expect("step"),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn contrastive(c: &mut Criterion) {
    let mut rng = seed::rng(0);
    let batch = ContrastiveBatch {
        anchors: Tensor::randn(32, 64, 1.0, &mut rng).l2_normalize_rows(0.0),
        positives: Tensor::randn(32, 64, 1.0, &mut rng).l2_normalize_rows(0.0),
        queue_negatives: Tensor::randn(1024, 64, 1.0, &mut rng).l2_normalize_rows(0.0),
        tau: 0.07,
    };
    c.bench_function("infonce b32 k1024 d64", |b| b.iter(|| infonce(&batch).expect("infonce")));
}

fn retrieval(c: &mut Criterion) {
    let mut rng = seed::rng(1);
    let sim = Tensor::randn(128, 128, 1.0, &mut rng);
    let matches: Vec<usize> = (0..128).collect();
    c.bench_function("recall 128x128", |b| b.iter(|| retrieval_from_similarity(&sim, &matches).expect("recall")));
}

criterion_group!(benches, train_step, contrastive, retrieval);
criterion_main!(benches);
