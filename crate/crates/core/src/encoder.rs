//! Feed-forward encoder producing `d`-dimensional embeddings, a linear
//! classifier head over `k` classes, and exact gradients via [`Tape`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{LvrError, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => m.map(f64::tanh),
            Activation::Relu => m.map(|x| x.max(0.0)),
        }
    }

    fn apply_graph(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Relu => tape.relu(v),
        }
    }
}

impl FromStr for Activation {
    type Err = LvrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(LvrError::Config(format!(
                "unknown activation '{other}', expected tanh or relu"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

/// Shape of the encoder and its classifier head.
///
/// The activation is applied after every encoder layer, including the one
/// that produces the embedding. The head is a single affine map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 32,
            hidden_dims: vec![],
            embedding_dim: 32,
            n_classes: 4,
            activation: Activation::Tanh,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(LvrError::Config("input_dim must be positive".into()));
        }
        if self.embedding_dim == 0 {
            return Err(LvrError::Config("embedding_dim must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(LvrError::Config(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(LvrError::Config(
                "hidden layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every encoder layer followed by the head.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 3);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims.push(self.n_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub weights: Matrix,
    /// `1 x fan_out`
    pub bias: Matrix,
}

/// Encoder layers plus the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: EncoderConfig,
    layers: Vec<Dense>,
    head: Dense,
}

impl Parameters {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut dense: Vec<Dense> = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        let head = dense.pop().expect("head layer always present");
        Ok(Parameters {
            config: config.clone(),
            layers: dense,
            head,
        })
    }

    /// All weights and biases set to zero.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Self::unflatten(config, &vec![0.0; config.parameter_count()])
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Dense {
        &mut self.head
    }

    fn all_dense(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(std::iter::once(&self.head))
    }

    pub fn len(&self) -> usize {
        self.config.parameter_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Layer by layer, weights (row-major) then bias; the head comes last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for d in self.all_dense() {
            out.extend_from_slice(d.weights.as_slice());
            out.extend_from_slice(d.bias.as_slice());
        }
        out
    }

    pub fn unflatten(config: &EncoderConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_count();
        if flat.len() != expected {
            return Err(LvrError::Dimension {
                context: "Parameters::unflatten",
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = &flat[offset..offset + n];
            offset += n;
            s.to_vec()
        };
        let mut dense: Vec<Dense> = config
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| Dense {
                weights: Matrix::from_vec(fan_in, fan_out, take(fan_in * fan_out))
                    .expect("sized above"),
                bias: Matrix::from_vec(1, fan_out, take(fan_out)).expect("sized above"),
            })
            .collect();
        let head = dense.pop().expect("head layer always present");
        Ok(Parameters {
            config: config.clone(),
            layers: dense,
            head,
        })
    }

    /// Embeddings for a batch of inputs (`m x input_dim` → `m x d`).
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        if inputs.cols() != self.config.input_dim {
            return Err(LvrError::Dimension {
                context: "forward: input width",
                expected: self.config.input_dim,
                actual: inputs.cols(),
            });
        }
        let act = self.config.activation;
        let mut h = inputs.clone();
        for layer in &self.layers {
            h = act.apply(&h.matmul(&layer.weights)?.add_row(&layer.bias)?);
        }
        Ok(h)
    }

    /// Head logits for a batch of embeddings (`m x d` → `m x k`).
    pub fn classify(&self, embeddings: &Matrix) -> Result<Matrix> {
        if embeddings.cols() != self.config.embedding_dim {
            return Err(LvrError::Dimension {
                context: "classify: embedding width",
                expected: self.config.embedding_dim,
                actual: embeddings.cols(),
            });
        }
        embeddings
            .matmul(&self.head.weights)?
            .add_row(&self.head.bias)
    }

    /// Puts every weight and bias on `tape` as a leaf.
    pub fn to_graph(&self, tape: &mut Tape) -> ParamVars {
        let mut leaf = |d: &Dense| DenseVars {
            weights: tape.leaf(d.weights.clone()),
            bias: tape.leaf(d.bias.clone()),
        };
        ParamVars {
            config: self.config.clone(),
            layers: self.layers.iter().map(&mut leaf).collect(),
            head: leaf(&self.head),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weights: Var,
    pub bias: Var,
}

/// Parameter leaves on a tape, in [`Parameters::flatten`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    config: EncoderConfig,
    layers: Vec<DenseVars>,
    head: DenseVars,
}

impl ParamVars {
    fn all_dense(&self) -> impl Iterator<Item = &DenseVars> {
        self.layers.iter().chain(std::iter::once(&self.head))
    }

    /// Every leaf, flatten order (weights then bias per layer).
    pub fn leaves(&self) -> Vec<Var> {
        self.all_dense().flat_map(|d| [d.weights, d.bias]).collect()
    }

    /// Graph version of [`Parameters::forward`].
    pub fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        let width = tape.value(inputs).cols();
        if width != self.config.input_dim {
            return Err(LvrError::Dimension {
                context: "forward: input width",
                expected: self.config.input_dim,
                actual: width,
            });
        }
        let mut h = inputs;
        for layer in &self.layers {
            let z = tape.matmul(h, layer.weights)?;
            let z = tape.add_row(z, layer.bias)?;
            h = self.config.activation.apply_graph(tape, z);
        }
        Ok(h)
    }

    /// Graph version of [`Parameters::classify`].
    pub fn classify(&self, tape: &mut Tape, embeddings: Var) -> Result<Var> {
        let z = tape.matmul(embeddings, self.head.weights)?;
        tape.add_row(z, self.head.bias)
    }
}

/// Evaluates `loss_fn` on a fresh tape and returns `(loss, gradient)`, the
/// gradient laid out like [`Parameters::flatten`].
///
/// A non-finite loss is an error rather than a NaN gradient.
pub fn gradient<F>(params: &Parameters, loss_fn: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.to_graph(&mut tape);
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss)[(0, 0)];
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(params.len());
    for leaf in vars.leaves() {
        match grads.get(leaf) {
            Some(g) => flat.extend_from_slice(g.as_slice()),
            None => {
                let v = tape.value(leaf);
                flat.extend(std::iter::repeat_n(0.0, v.rows() * v.cols()));
            }
        }
    }
    if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
        return Err(LvrError::NonFinite(format!("gradient entry {i}")));
    }
    Ok((value, flat))
}

/// Index of the largest logit per row; ties go to the lowest class id.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
