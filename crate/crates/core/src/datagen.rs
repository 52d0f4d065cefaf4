//! Synthetic datasets with a tunable protected-attribute signal, CSV
//! ingestion, and stratified splitting.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = LvrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(LvrError::Data(format!("unknown split '{other}'"))),
        }
    }
}

/// One protected attribute: a name and per-sample value ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtectedAttribute {
    pub name: String,
    pub n_values: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub n_classes: usize,
    pub task_labels: Vec<usize>,
    pub protected: Vec<ProtectedAttribute>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.task_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_labels.is_empty()
    }

    /// Checks label ranges and that every per-sample column has the same length.
    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.rows();
        let same_len = self.task_labels.len() == n
            && self.split.len() == n
            && self.protected.iter().all(|a| a.labels.len() == n);
        if !same_len {
            return Err(LvrError::Data("dataset columns differ in length".into()));
        }
        if let Some(y) = self.task_labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(LvrError::Data(format!(
                "task label {y} out of range for {} classes",
                self.n_classes
            )));
        }
        for attr in &self.protected {
            if let Some(v) = attr.labels.iter().find(|&&v| v >= attr.n_values) {
                return Err(LvrError::Data(format!(
                    "attribute '{}' value {v} out of range for {} values",
                    attr.name, attr.n_values
                )));
            }
        }
        Ok(())
    }

    /// Sample indices tagged with `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Subset of rows as a new dataset (splits carried along).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            n_classes: self.n_classes,
            task_labels: indices.iter().map(|&i| self.task_labels[i]).collect(),
            protected: self
                .protected
                .iter()
                .map(|a| ProtectedAttribute {
                    name: a.name.clone(),
                    n_values: a.n_values,
                    labels: indices.iter().map(|&i| a.labels[i]).collect(),
                })
                .collect(),
            split: indices.iter().map(|&i| self.split[i]).collect(),
        }
    }
}

/// Parameters of the prototype-plus-noise generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_classes: usize,
    /// Cardinality of each protected attribute.
    pub n_attr_values: Vec<usize>,
    pub input_dim: usize,
    pub task_strength: f64,
    /// Scale of each attribute's prototype; 0 removes the attribute from the features.
    pub attr_strength: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 1000,
            n_classes: 4,
            n_attr_values: vec![2],
            input_dim: 32,
            task_strength: 2.0,
            attr_strength: vec![2.0],
            noise_std: 0.5,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LvrError::Config(msg));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.n_samples < self.n_classes {
            return bad(format!(
                "n_samples ({}) must be at least n_classes ({})",
                self.n_samples, self.n_classes
            ));
        }
        if self.n_attr_values.len() != self.attr_strength.len() {
            return bad("n_attr_values and attr_strength must have one entry per attribute".into());
        }
        if let Some(v) = self.n_attr_values.iter().find(|&&v| v < 2) {
            return bad(format!("every attribute needs at least 2 values, got {v}"));
        }
        let reals = [self.task_strength, self.noise_std]
            .into_iter()
            .chain(self.attr_strength.iter().copied());
        for v in reals {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!(
                    "strengths and noise must be finite and non-negative, got {v}"
                ));
            }
        }
        Ok(())
    }
}

fn unit_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Draws a dataset: `task_strength * P_task[y] + sum_a attr_strength[a] * P_attr[a][v_a] + noise`.
///
/// Task labels are a shuffled balanced sequence (every class appears), attribute
/// values are uniform and independent of the task. All samples are tagged
/// `train`; use [`split`] to partition.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.input_dim;

    let task_protos = unit_vectors(&mut rng, spec.n_classes, dim);
    let attr_protos: Vec<Vec<Vec<f64>>> = spec
        .n_attr_values
        .iter()
        .map(|&v| unit_vectors(&mut rng, v, dim))
        .collect();

    let mut task_labels: Vec<usize> = (0..spec.n_samples).map(|i| i % spec.n_classes).collect();
    task_labels.shuffle(&mut rng);
    let attr_labels: Vec<Vec<usize>> = spec
        .n_attr_values
        .iter()
        .map(|&v| {
            (0..spec.n_samples)
                .map(|_| rng.random_range(0..v))
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| LvrError::Config(format!("noise_std: {e}")))?;
    let mut inputs = Matrix::zeros(spec.n_samples, dim);
    for i in 0..spec.n_samples {
        let row = inputs.row_mut(i);
        for (x, p) in row.iter_mut().zip(&task_protos[task_labels[i]]) {
            *x = spec.task_strength * p;
        }
        for (a, protos) in attr_protos.iter().enumerate() {
            let s = spec.attr_strength[a];
            for (x, p) in row.iter_mut().zip(&protos[attr_labels[a][i]]) {
                *x += s * p;
            }
        }
        for x in row.iter_mut() {
            *x += noise.sample(&mut rng);
        }
    }

    let protected = attr_labels
        .into_iter()
        .enumerate()
        .map(|(a, labels)| ProtectedAttribute {
            name: format!("attr{a}"),
            n_values: spec.n_attr_values[a],
            labels,
        })
        .collect();

    Ok(Dataset {
        inputs,
        n_classes: spec.n_classes,
        task_labels,
        protected,
        split: vec![Split::Train; spec.n_samples],
    })
}

/// Column mapping for [`load_csv`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub inputs: Vec<String>,
    pub task: String,
    #[serde(default)]
    pub protected: Vec<String>,
    #[serde(default)]
    pub split: Option<String>,
}

/// First-seen dense encoding of string labels.
#[derive(Default)]
struct LabelEncoder {
    ids: HashMap<String, usize>,
}

impl LabelEncoder {
    fn encode(&mut self, raw: &str) -> usize {
        let next = self.ids.len();
        *self.ids.entry(raw.to_string()).or_insert(next)
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Reads a headered, comma-delimited file. Labels are re-encoded to dense ids
/// in first-seen order. Without a split column every row is tagged `train`.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, 1, "<header>", e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(LvrError::Data(format!("{}: no data rows", path.display())));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| csv_error(path, 1, name, "unknown column".into()))
    };
    let input_cols = schema
        .inputs
        .iter()
        .map(|n| column(n))
        .collect::<Result<Vec<_>>>()?;
    if input_cols.is_empty() {
        return Err(LvrError::Config(
            "schema must name at least one input column".into(),
        ));
    }
    let task_col = column(&schema.task)?;
    let attr_cols = schema
        .protected
        .iter()
        .map(|n| column(n))
        .collect::<Result<Vec<_>>>()?;
    let split_col = schema.split.as_deref().map(column).transpose()?;

    let mut data = Vec::new();
    let mut task_enc = LabelEncoder::default();
    let mut task_labels = Vec::new();
    let mut attr_enc: Vec<LabelEncoder> =
        attr_cols.iter().map(|_| LabelEncoder::default()).collect();
    let mut attr_labels: Vec<Vec<usize>> = vec![Vec::new(); attr_cols.len()];
    let mut split = Vec::new();

    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| csv_error(path, line, "<record>", e.to_string()))?;
        let field = |col: usize, name: &str| {
            record
                .get(col)
                .ok_or_else(|| csv_error(path, line, name, "missing field".into()))
        };
        for (&col, name) in input_cols.iter().zip(&schema.inputs) {
            let raw = field(col, name)?;
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| csv_error(path, line, name, format!("non-numeric value '{raw}'")))?;
            data.push(v);
        }
        task_labels.push(task_enc.encode(field(task_col, &schema.task)?.trim()));
        for (a, (&col, name)) in attr_cols.iter().zip(&schema.protected).enumerate() {
            attr_labels[a].push(attr_enc[a].encode(field(col, name)?.trim()));
        }
        split.push(match (split_col, &schema.split) {
            (Some(col), Some(name)) => field(col, name)?
                .trim()
                .parse::<Split>()
                .map_err(|e| csv_error(path, line, name, e.to_string()))?,
            _ => Split::Train,
        });
    }

    if task_labels.is_empty() {
        return Err(LvrError::Data(format!("{}: no data rows", path.display())));
    }
    let n = task_labels.len();
    let protected = attr_labels
        .into_iter()
        .zip(attr_enc)
        .zip(&schema.protected)
        .map(|((labels, enc), name)| ProtectedAttribute {
            name: name.clone(),
            n_values: enc.len(),
            labels,
        })
        .collect();
    Ok(Dataset {
        inputs: Matrix::from_vec(n, input_cols.len(), data)?,
        n_classes: task_enc.len(),
        task_labels,
        protected,
        split,
    })
}

fn csv_error(path: &Path, row: usize, column: &str, message: String) -> LvrError {
    LvrError::Csv {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    }
}

fn csv_open_error(path: &Path, e: csv::Error) -> LvrError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LvrError::io(path, io),
        other => csv_error(path, 0, "<file>", format!("{other:?}")),
    }
}

/// Writes `x0..x{n-1},task,<attr names>,split` with integer label ids.
/// Values use 17 significant digits, so [`load_csv`] reads them back exactly.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_open_error(path, e))?;
    let write_err = |e: csv::Error| csv_error(path, 0, "<write>", e.to_string());
    let mut header: Vec<String> = (0..dataset.inputs.cols())
        .map(|j| format!("x{j}"))
        .collect();
    header.push("task".into());
    header.extend(dataset.protected.iter().map(|a| a.name.clone()));
    header.push("split".into());
    writer.write_record(&header).map_err(write_err)?;
    for (i, row) in dataset.inputs.iter_rows().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        fields.push(dataset.task_labels[i].to_string());
        fields.extend(dataset.protected.iter().map(|a| a.labels[i].to_string()));
        fields.push(dataset.split[i].to_string());
        writer.write_record(&fields).map_err(write_err)?;
    }
    writer.flush().map_err(|e| LvrError::io(path, e))
}

/// Train/val/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(LvrError::Config(format!(
                "split fractions must be non-negative: {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LvrError::Config(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Re-tags every sample, stratified by task label.
///
/// Per class with `n` samples: `round(train * n)` go to train, `round(val * n)`
/// (capped by what is left) to val, the rest to test. A class always keeps at
/// least one train sample when the train fraction is positive.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes];
    for (i, &y) in dataset.task_labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| LvrError::Data(format!("task label {y} out of range")))?
            .push(i);
    }
    let mut tags = vec![Split::Train; dataset.len()];
    for mut members in by_class {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = (fractions.train * n as f64).round() as usize;
        if fractions.train > 0.0 {
            n_train = n_train.max(1);
        }
        let n_train = n_train.min(n);
        let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);
        for (pos, &i) in members.iter().enumerate() {
            tags[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(Dataset {
        split: tags,
        ..dataset.clone()
    })
}
