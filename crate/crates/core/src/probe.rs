//! Leakage audit: small tanh probes trained on frozen embeddings to recover
//! each protected attribute, scored with balanced accuracy.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::encoder::{self, argmax_rows, Activation, EncoderConfig, Parameters};
use crate::error::{LvrError, Result};
use crate::matrix::Matrix;
use crate::optim::{Optimizer, OptimizerKind};
use crate::stats::MeanStd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_probes: usize,
    /// Requested hidden width; the effective width is capped at `4 * d`.
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of the probed embeddings used to fit the probes; the rest scores them.
    pub train_fraction: f64,
    pub seed_base: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            n_probes: 5,
            hidden_dim: 128,
            epochs: 40,
            learning_rate: 1e-4,
            batch_size: 32,
            train_fraction: 0.8,
            seed_base: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LvrError::Config(m.into()));
        if self.n_probes == 0 {
            return bad("n_probes must be at least 1");
        }
        if self.hidden_dim == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("probe hidden_dim, epochs and batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("probe learning_rate must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("probe train_fraction must lie strictly between 0 and 1");
        }
        Ok(())
    }

    pub fn effective_hidden(&self, embedding_dim: usize) -> usize {
        self.hidden_dim.min(4 * embedding_dim).max(1)
    }
}

/// Mean per-value recall over the values that occur in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], n_values: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(LvrError::Data("balanced accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(LvrError::Dimension {
            context: "balanced_accuracy",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let mut support = vec![0usize; n_values];
    let mut hits = vec![0usize; n_values];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= n_values || p >= n_values {
            return Err(LvrError::Data(format!(
                "value out of range for {n_values} attribute values"
            )));
        }
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let recalls: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .map(|(&s, &h)| h as f64 / s as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeProbe {
    pub name: String,
    pub n_values: usize,
    /// `1 / n_values`, the score of a probe that learned nothing.
    pub chance: f64,
    pub mean: f64,
    pub std: f64,
    pub per_probe: Vec<f64>,
    /// The probe train partition held a single value, so no probe was fit.
    pub degenerate: bool,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub attributes: Vec<AttributeProbe>,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub config: ProbeConfig,
}

/// Row order that depends only on row contents, so the audit does not depend
/// on how the caller ordered the samples.
fn canonical_order(data: &Dataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| {
        let rows = data
            .inputs
            .row(a)
            .iter()
            .zip(data.inputs.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal);
        rows.unwrap_or(Ordering::Equal)
            .then(data.task_labels[a].cmp(&data.task_labels[b]))
            .then_with(|| {
                data.protected
                    .iter()
                    .map(|attr| attr.labels[a].cmp(&attr.labels[b]))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
    idx
}

/// Splits `order` into probe-train / probe-test, stratified by `labels`.
fn partition(
    order: &[usize],
    labels: &[usize],
    n_values: usize,
    frac: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_value: Vec<Vec<usize>> = vec![Vec::new(); n_values];
    for &i in order {
        by_value[labels[i]].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut members in by_value {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = (frac * n as f64).round() as usize;
        // keep at least one sample on each side when the value has two or more
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        test.extend_from_slice(&members[n_train.min(n)..]);
        members.truncate(n_train.min(n));
        train.extend(members);
    }
    (train, test)
}

/// Fits one `d -> hidden (tanh) -> n_values` probe and returns its
/// predictions on `test`.
#[allow(clippy::too_many_arguments)]
fn fit_probe(
    inputs: &Matrix,
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    n_values: usize,
    hidden: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    // one tanh layer plus the linear head is exactly the two-layer probe
    let net = EncoderConfig {
        input_dim: inputs.cols(),
        hidden_dims: vec![],
        embedding_dim: hidden,
        n_classes: n_values,
        activation: Activation::Tanh,
        init_seed: seed,
    };
    let mut params = Parameters::init(&net)?;
    let mut flat = params.flatten();
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.learning_rate, flat.len())?;
    for epoch in 0..config.epochs {
        let mut order = train.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let x = inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, grad) = encoder::gradient(&params, |tape, vars| {
                let xv = tape.leaf(x);
                let h = vars.forward(tape, xv)?;
                let logits = vars.classify(tape, h)?;
                tape.softmax_cross_entropy(logits, y)
            })?;
            opt.step(&mut flat, &grad);
            params = Parameters::unflatten(&net, &flat)?;
        }
    }
    let x_test = inputs.select_rows(test);
    Ok(argmax_rows(&params.classify(&params.forward(&x_test)?)?))
}

/// Trains `n_probes` independently seeded probes per protected attribute and
/// reports their balanced accuracy on a held-out share of `embedded`.
///
/// `embedded.inputs` are the frozen embeddings; they are only read.
pub fn train_probes(embedded: &Dataset, config: &ProbeConfig) -> Result<ProbeReport> {
    config.validate()?;
    if embedded.is_empty() {
        return Err(LvrError::Data("no embeddings to probe".into()));
    }
    if embedded.protected.is_empty() {
        return Err(LvrError::Data("no protected attributes to probe".into()));
    }
    if !embedded.inputs.is_finite() {
        return Err(LvrError::NonFinite("embeddings".into()));
    }
    let d = embedded.inputs.cols();
    let hidden = config.effective_hidden(d);
    let order = canonical_order(embedded);

    let mut attributes = Vec::with_capacity(embedded.protected.len());
    for attr in &embedded.protected {
        let n_values = attr.n_values;
        let chance = 1.0 / n_values as f64;
        let (train, test) = partition(
            &order,
            &attr.labels,
            n_values,
            config.train_fraction,
            config.seed_base,
        );
        if train.is_empty() || test.is_empty() {
            return Err(LvrError::Data(format!(
                "attribute '{}': probe partition has an empty side",
                attr.name
            )));
        }
        let mut distinct: Vec<usize> = train.iter().map(|&i| attr.labels[i]).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let degenerate = distinct.len() < 2 || n_values < 2;

        let per_probe = if degenerate {
            log::warn!(
                "attribute '{}' has a single value in the probe train partition; reporting chance",
                attr.name
            );
            vec![chance; config.n_probes]
        } else {
            let test_labels: Vec<usize> = test.iter().map(|&i| attr.labels[i]).collect();
            (0..config.n_probes)
                .into_par_iter()
                .map(|p| {
                    let seed = config.seed_base.wrapping_add(p as u64);
                    let preds = fit_probe(
                        &embedded.inputs,
                        &attr.labels,
                        &train,
                        &test,
                        n_values,
                        hidden,
                        config,
                        seed,
                    )?;
                    balanced_accuracy(&preds, &test_labels, n_values)
                })
                .collect::<Result<Vec<f64>>>()?
        };
        let stats = MeanStd::of(&per_probe);
        attributes.push(AttributeProbe {
            name: attr.name.clone(),
            n_values,
            chance,
            mean: stats.mean,
            std: stats.std,
            per_probe,
            degenerate,
            n_train: train.len(),
            n_test: test.len(),
        });
    }
    Ok(ProbeReport {
        attributes,
        hidden_dim: hidden,
        activation: Activation::Tanh,
        config: config.clone(),
    })
}
