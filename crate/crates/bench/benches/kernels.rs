use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use lvr_core::lvr::{self, CenterState, ObjectiveWeights};
use lvr_core::{
    balanced_accuracy, batch_centers, generate, regularization_loss, EncoderConfig, Parameters,
    SyntheticSpec,
};

fn batch() -> (Parameters, lvr_core::Matrix, Vec<usize>) {
    let data = generate(&SyntheticSpec::default()).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    let params = Parameters::init(&EncoderConfig::default()).unwrap();
    let labels = idx.iter().map(|&i| data.task_labels[i]).collect();
    (params, data.inputs.select_rows(&idx), labels)
}

fn encoder(c: &mut Criterion) {
    let (params, x, _) = batch();
    c.bench_function("forward 32x32 -> 32", |b| {
        b.iter(|| params.forward(black_box(&x)).unwrap())
    });
}

fn centers(c: &mut Criterion) {
    let (params, x, labels) = batch();
    let z = params.forward(&x).unwrap();
    let (_, state) = batch_centers(&z, &labels, &CenterState::new(4, 32, 0.3).unwrap()).unwrap();
    c.bench_function("batch_centers k=4 d=32", |b| {
        b.iter(|| batch_centers(black_box(&z), &labels, &state).unwrap())
    });
    let (used, _) = batch_centers(&z, &labels, &state).unwrap();
    c.bench_function("regularization_loss", |b| {
        b.iter(|| regularization_loss(black_box(&z), &labels, &used).unwrap())
    });
}

fn objective(c: &mut Criterion) {
    let (params, x, labels) = batch();
    let state = CenterState::new(4, 32, 0.3).unwrap();
    let weights = ObjectiveWeights {
        lambda: 0.1,
        center_loss: true,
    };
    c.bench_function("objective value + gradient", |b| {
        b.iter(|| {
            lvr_core::gradient(&params, |tape, vars| {
                Ok(lvr::objective(tape, vars, &x, &labels, &state, weights)?.total)
            })
            .unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let labels: Vec<usize> = (0..10_000).map(|i| (i * 7 + i / 3) % 5).collect();
    let preds: Vec<usize> = (0..10_000).map(|i| (i * 3) % 5).collect();
    c.bench_function("balanced_accuracy 10k", |b| {
        b.iter(|| balanced_accuracy(black_box(&preds), &labels, 5).unwrap())
    });
}

criterion_group!(benches, encoder, centers, objective, metrics);
criterion_main!(benches);
