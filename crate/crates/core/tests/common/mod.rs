//! Test-only oracles, independent of the code paths they check.
#![allow(dead_code)]

use lvr_core::lvr::{self, CenterState, ObjectiveWeights};
use lvr_core::{batch_centers, center_loss, regularization_loss, total_loss};
use lvr_core::{Activation, Dataset, EncoderConfig, Matrix, Parameters, Split, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Objective value through the plain (non-tape) API.
pub fn objective_value(
    params: &Parameters,
    inputs: &Matrix,
    labels: &[usize],
    state: &CenterState,
    weights: ObjectiveWeights,
) -> f64 {
    let z = params.forward(inputs).unwrap();
    let logits = params.classify(&z).unwrap();
    let task = mean_cross_entropy(&logits, labels);
    let (used, _) = batch_centers(&z, labels, state).unwrap();
    let reg = regularization_loss(&z, labels, &used).unwrap();
    let center = if weights.center_loss {
        center_loss(&used, params).unwrap()
    } else {
        0.0
    };
    total_loss(task, reg, center, weights.lambda).unwrap().total
}

pub fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// Analytic gradient of the objective via the tape.
pub fn analytic_gradient(
    params: &Parameters,
    inputs: &Matrix,
    labels: &[usize],
    state: &CenterState,
    weights: ObjectiveWeights,
) -> Vec<f64> {
    let (_, g) = lvr_core::gradient(params, |tape, vars| {
        Ok(lvr::objective(tape, vars, inputs, labels, state, weights)?.total)
    })
    .unwrap();
    g
}

/// Central finite differences of `f` around `params`.
pub fn finite_difference(
    params: &Parameters,
    step: f64,
    f: impl Fn(&Parameters) -> f64,
) -> Vec<f64> {
    let cfg = params.config().clone();
    let base = params.flatten();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += step;
            let mut minus = base.clone();
            minus[i] -= step;
            let fp = f(&Parameters::unflatten(&cfg, &plus).unwrap());
            let fm = f(&Parameters::unflatten(&cfg, &minus).unwrap());
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise relative error over entries with `|analytic| > 1e-8`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, _)| a.abs() > 1e-8)
        .map(|(a, n)| (a - n).abs() / a.abs())
        .fold(0.0, f64::max)
}

/// Initialised parameters with every entry (biases included) nudged, so no
/// ReLU pre-activation sits exactly on its kink.
pub fn jittered_params(cfg: &EncoderConfig, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = Parameters::init(cfg)
        .unwrap()
        .flatten()
        .into_iter()
        .map(|v| v + rng.random_range(-0.1..0.1))
        .collect();
    Parameters::unflatten(cfg, &flat).unwrap()
}

pub fn gradient_configs() -> Vec<EncoderConfig> {
    vec![
        EncoderConfig {
            input_dim: 5,
            hidden_dims: vec![],
            embedding_dim: 3,
            n_classes: 4,
            activation: Activation::Tanh,
            init_seed: 0,
        },
        EncoderConfig {
            input_dim: 4,
            hidden_dims: vec![6],
            embedding_dim: 3,
            n_classes: 4,
            activation: Activation::Relu,
            init_seed: 0,
        },
        EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![5, 4],
            embedding_dim: 2,
            n_classes: 4,
            activation: Activation::Tanh,
            init_seed: 0,
        },
    ]
}

/// An 8-sample batch over 4 classes: class 0 has 4 samples, class 1 is a
/// singleton without history, class 2 has 2 samples plus history, class 3 is
/// absent but has history; one more singleton (class 2 history) is covered by
/// the state. Returns `(inputs, labels, state)`.
pub fn mixed_batch(
    cfg: &EncoderConfig,
    seed: u64,
    omega: f64,
) -> (Matrix, Vec<usize>, CenterState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let labels = vec![0, 2, 0, 1, 0, 2, 0, 2];
    let data = (0..labels.len() * cfg.input_dim)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    let inputs = Matrix::from_vec(labels.len(), cfg.input_dim, data).unwrap();

    let d = cfg.embedding_dim;
    let mut centers = Matrix::zeros(cfg.n_classes, d);
    for v in centers.as_mut_slice() {
        *v = rng.random_range(-0.8..0.8);
    }
    let initialized = vec![false, false, true, true];
    let state = CenterState::from_parts(centers, initialized, omega).unwrap();
    (inputs, labels, state)
}

/// Brute-force balanced accuracy straight from a confusion matrix.
pub fn brute_force_balanced_accuracy(
    predictions: &[usize],
    labels: &[usize],
    n_values: usize,
) -> f64 {
    let mut confusion = vec![vec![0u64; n_values]; n_values];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let mut recalls = Vec::new();
    for (true_value, row) in confusion.iter().enumerate() {
        let support: u64 = row.iter().sum();
        if support > 0 {
            recalls.push(row[true_value] as f64 / support as f64);
        }
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

/// Nearest-class-mean classifier fit on `train`, scored (balanced) on `test`.
pub fn nearest_centroid_balanced_accuracy(
    inputs: &Matrix,
    labels: &[usize],
    n_values: usize,
    train: &[usize],
    test: &[usize],
) -> f64 {
    let d = inputs.cols();
    let mut sums = vec![vec![0.0; d]; n_values];
    let mut counts = vec![0usize; n_values];
    for &i in train {
        counts[labels[i]] += 1;
        for (s, x) in sums[labels[i]].iter_mut().zip(inputs.row(i)) {
            *s += x;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect();
    let preds: Vec<usize> = test
        .iter()
        .map(|&i| {
            let row = inputs.row(i);
            (0..n_values)
                .min_by(|&a, &b| {
                    let da: f64 = row
                        .iter()
                        .zip(&means[a])
                        .map(|(x, m)| (x - m).powi(2))
                        .sum();
                    let db: f64 = row
                        .iter()
                        .zip(&means[b])
                        .map(|(x, m)| (x - m).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap()
        })
        .collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    brute_force_balanced_accuracy(&preds, &truth, n_values)
}

/// Plain cross-entropy training with a hand-written Adam, mirroring the
/// trainer's batching. Returns per-epoch mean task loss.
pub fn plain_ce_oracle(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> (Vec<f64>, Vec<f64>) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut params = Parameters::init(encoder).unwrap();
    let mut flat = params.flatten();
    let mut m = vec![0.0; flat.len()];
    let mut v = vec![0.0; flat.len()];
    let mut t = 0;
    let train_idx = dataset.indices(Split::Train);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = dataset.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| dataset.task_labels[i]).collect();
            let (loss, grad) = lvr_core::gradient(&params, |tape, vars| {
                let xv = tape.leaf(x);
                let z = vars.forward(tape, xv)?;
                let logits = vars.classify(tape, z)?;
                tape.softmax_cross_entropy(logits, y)
            })
            .unwrap();
            t += 1;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            for i in 0..flat.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                flat[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            params = Parameters::unflatten(encoder, &flat).unwrap();
            sum += loss;
            batches += 1;
        }
        losses.push(sum / batches as f64);
    }
    (losses, flat)
}
