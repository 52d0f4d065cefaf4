//! Mini-batch training under the class-center objective, accuracy
//! evaluation, and embedding export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datagen::{CsvSchema, Dataset, ProtectedAttribute, Split};
use crate::encoder::{argmax_rows, EncoderConfig, Parameters};
use crate::error::{LvrError, Result};
use crate::lvr::{self, CenterState, LossBreakdown, ObjectiveWeights};
use crate::matrix::Matrix;
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub omega: f64,
    pub enable_center_loss: bool,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda: lvr::DEFAULT_LAMBDA,
            omega: lvr::DEFAULT_OMEGA,
            enable_center_loss: true,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(LvrError::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(LvrError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(LvrError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LvrError::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(LvrError::Config(format!(
                "omega must lie in [0, 1], got {}",
                self.omega
            )));
        }
        Ok(())
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            lambda: self.lambda,
            center_loss: self.enable_center_loss,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub train: Option<f64>,
    pub val: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch-averaged loss components, one entry per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub accuracy: SplitAccuracy,
    pub wall_clock_secs: f64,
    pub config: TrainConfig,
    pub seed: u64,
}

/// Plain outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: Parameters,
    pub centers: CenterState,
    pub report: TrainReport,
}

fn check_compatible(dataset: &Dataset, encoder: &EncoderConfig) -> Result<()> {
    if dataset.inputs.cols() != encoder.input_dim {
        return Err(LvrError::Dimension {
            context: "dataset width vs encoder input_dim",
            expected: encoder.input_dim,
            actual: dataset.inputs.cols(),
        });
    }
    if dataset.n_classes > encoder.n_classes {
        return Err(LvrError::Config(format!(
            "dataset has {} classes but the encoder head only {}",
            dataset.n_classes, encoder.n_classes
        )));
    }
    Ok(())
}

/// Trains a freshly initialized encoder on the train split.
///
/// Each epoch shuffles the train indices with a generator keyed by
/// `(shuffle_seed, epoch)`. The center state lives for the whole run.
pub fn train(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    dataset.validate()?;
    check_compatible(dataset, encoder)?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(LvrError::Data("train split is empty".into()));
    }

    let started = Instant::now();
    let mut params = Parameters::init(encoder)?;
    let mut flat = params.flatten();
    let mut state = CenterState::new(encoder.n_classes, encoder.embedding_dim, config.omega)?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, flat.len())?;
    let weights = config.weights();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut sum = LossBreakdown {
            lambda: config.lambda,
            ..LossBreakdown::default()
        };
        let mut n_batches = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let inputs = dataset.inputs.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.task_labels[i]).collect();

            let mut tape = Tape::new();
            let vars = params.to_graph(&mut tape);
            let graph = lvr::objective(&mut tape, &vars, &inputs, &labels, &state, weights)?;
            let loss = tape.value(graph.total)[(0, 0)];
            if !loss.is_finite() {
                return Err(LvrError::Diverged { epoch, batch, loss });
            }
            let breakdown = graph.breakdown(&tape, config.lambda)?;
            let grads = tape.backward(graph.total).map_err(|_| LvrError::Diverged {
                epoch,
                batch,
                loss,
            })?;
            let mut grad = Vec::with_capacity(flat.len());
            for leaf in vars.leaves() {
                match grads.get(leaf) {
                    Some(g) => grad.extend_from_slice(g.as_slice()),
                    None => {
                        let shape = tape.value(leaf).shape();
                        grad.extend(std::iter::repeat_n(0.0, shape.0 * shape.1));
                    }
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(LvrError::Diverged { epoch, batch, loss });
            }
            state = graph.next_state(&tape, &state)?;
            optimizer.step(&mut flat, &grad);
            params = Parameters::unflatten(encoder, &flat)?;

            sum.task_loss += breakdown.task_loss;
            sum.reg_loss += breakdown.reg_loss;
            sum.center_loss += breakdown.center_loss;
            sum.total += breakdown.total;
            n_batches += 1;
        }
        let n = n_batches as f64;
        epochs.push(LossBreakdown {
            task_loss: sum.task_loss / n,
            reg_loss: sum.reg_loss / n,
            center_loss: sum.center_loss / n,
            lambda: config.lambda,
            total: sum.total / n,
        });
        log::debug!("epoch {epoch}: {:?}", epochs.last());
    }

    let split_acc = |s| -> Result<Option<f64>> {
        if dataset.indices(s).is_empty() {
            Ok(None)
        } else {
            evaluate(&params, dataset, s).map(Some)
        }
    };
    let accuracy = SplitAccuracy {
        train: split_acc(Split::Train)?,
        val: split_acc(Split::Val)?,
        test: split_acc(Split::Test)?,
    };
    Ok(TrainedModel {
        params,
        centers: state,
        report: TrainReport {
            epochs,
            accuracy,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            config: config.clone(),
            seed: config.shuffle_seed,
        },
    })
}

/// Fraction of `split` samples whose top logit (lowest id on ties) is the task label.
pub fn evaluate(params: &Parameters, dataset: &Dataset, split: Split) -> Result<f64> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(LvrError::Data(format!("{split} split is empty")));
    }
    let inputs = dataset.inputs.select_rows(&idx);
    let logits = params.classify(&params.forward(&inputs)?)?;
    let correct = argmax_rows(&logits)
        .iter()
        .zip(&idx)
        .filter(|(&pred, &i)| pred == dataset.task_labels[i])
        .count();
    Ok(correct as f64 / idx.len() as f64)
}

/// Embeddings of one split as a dataset: inputs are the embeddings, labels carried over.
pub fn embed_split(params: &Parameters, dataset: &Dataset, split: Split) -> Result<Dataset> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(LvrError::Data(format!("{split} split is empty")));
    }
    let mut subset = dataset.subset(&idx);
    subset.inputs = params.forward(&subset.inputs)?;
    Ok(subset)
}

/// Writes `e0..e{d-1},task,<attr names>`, one row per sample of `split`.
/// Values use 17 significant digits so they parse back bit-for-bit.
pub fn export_embeddings(
    params: &Parameters,
    dataset: &Dataset,
    split: Split,
    path: &Path,
) -> Result<()> {
    let embedded = embed_split(params, dataset, split)?;
    write_embeddings(&embedded, path)
}

pub fn write_embeddings(embedded: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| LvrError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let d = embedded.inputs.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("e{j}")).collect();
    header.push("task".into());
    header.extend(embedded.protected.iter().map(|a| a.name.clone()));
    let io = |e| LvrError::io(path, e);
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (i, row) in embedded.inputs.iter_rows().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        fields.push(embedded.task_labels[i].to_string());
        fields.extend(embedded.protected.iter().map(|a| a.labels[i].to_string()));
        writeln!(out, "{}", fields.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Schema matching the embedding export header.
pub fn embedding_schema(header: &[String]) -> Result<CsvSchema> {
    let inputs: Vec<String> = header
        .iter()
        .filter(|h| h.len() > 1 && h.starts_with('e') && h[1..].chars().all(|c| c.is_ascii_digit()))
        .cloned()
        .collect();
    if inputs.is_empty() {
        return Err(LvrError::Data("embedding file has no e<N> columns".into()));
    }
    if !header.iter().any(|h| h == "task") {
        return Err(LvrError::Data("embedding file has no 'task' column".into()));
    }
    let protected = header
        .iter()
        .filter(|h| !inputs.contains(h) && h.as_str() != "task")
        .cloned()
        .collect();
    Ok(CsvSchema {
        inputs,
        task: "task".into(),
        protected,
        split: None,
    })
}

/// Reads a file written by [`export_embeddings`]. Label columns hold integer
/// ids and are kept as written; each label's value count is its largest id + 1.
pub fn load_embeddings(path: &Path) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => LvrError::io(path, io),
        other => LvrError::Data(format!("{}: {other:?}", path.display())),
    })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| LvrError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let schema = embedding_schema(&header)?;
    let position = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .expect("column from header")
    };
    let input_cols: Vec<usize> = schema.inputs.iter().map(|n| position(n)).collect();
    let label_cols: Vec<(usize, &str)> = std::iter::once(schema.task.as_str())
        .chain(schema.protected.iter().map(String::as_str))
        .map(|n| (position(n), n))
        .collect();

    let mut values = Vec::new();
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); label_cols.len()];
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| LvrError::Csv {
            path: path.to_path_buf(),
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        for &c in &input_cols {
            let v: f64 = record[c].trim().parse().map_err(|_| LvrError::Csv {
                path: path.to_path_buf(),
                row,
                column: header[c].clone(),
                message: format!("not a number: '{}'", &record[c]),
            })?;
            values.push(v);
        }
        for (out, &(c, name)) in labels.iter_mut().zip(&label_cols) {
            let id: usize = record[c].trim().parse().map_err(|_| LvrError::Csv {
                path: path.to_path_buf(),
                row,
                column: name.to_string(),
                message: format!("not a label id: '{}'", &record[c]),
            })?;
            out.push(id);
        }
    }
    let n = labels[0].len();
    if n == 0 {
        return Err(LvrError::Data(format!("{}: no data rows", path.display())));
    }
    let n_values = |ids: &[usize]| ids.iter().max().map_or(0, |m| m + 1);
    let mut labels = labels.into_iter();
    let task_labels = labels.next().expect("task column");
    let protected = schema
        .protected
        .iter()
        .zip(labels)
        .map(|(name, ids)| ProtectedAttribute {
            name: name.clone(),
            n_values: n_values(&ids).max(2),
            labels: ids,
        })
        .collect();
    let dataset = Dataset {
        inputs: Matrix::from_vec(n, input_cols.len(), values)?,
        n_classes: n_values(&task_labels).max(2),
        task_labels,
        protected,
        split: vec![Split::Train; n],
    };
    dataset.validate()?;
    Ok(dataset)
}
