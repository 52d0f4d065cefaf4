//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates adjoints. Only the operations needed by the encoder and the
//! class-center objective are provided.

use crate::error::{LvrError, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<Vec<usize>>),
    /// `out_r = weight_r * in_r + const_r`; the constant carries no gradient.
    Blend(Var, Vec<f64>),
    /// `sum_r ||in_r||_2`; the stored norms drive the backward pass.
    RowNormSum(Var, Vec<f64>),
    /// Mean softmax cross-entropy; stores the softmax probabilities.
    SoftmaxCrossEntropy(Var, Vec<usize>, Matrix),
    HalfSumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to the scalar passed to [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `var`; `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }
}

fn dim_err(context: &'static str, expected: usize, actual: usize) -> LvrError {
    LvrError::Dimension {
        context,
        expected,
        actual,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Broadcasts a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row `r` of the output is row `indices[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(dim_err("gather_rows", rows, bad));
        }
        let v = self.value(a).select_rows(&indices);
        Ok(self.push(v, Op::GatherRows(a, indices)))
    }

    /// Row `g` of the output is the mean of the rows of `a` listed in `groups[g]`.
    pub fn segment_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let src = self.value(a);
        let mut out = Matrix::zeros(groups.len(), src.cols());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(LvrError::Data("segment_mean: empty group".into()));
            }
            let out_row = out.row_mut(g);
            for &i in members {
                if i >= src.rows() {
                    return Err(dim_err("segment_mean", src.rows(), i));
                }
                for (o, v) in out_row.iter_mut().zip(src.row(i)) {
                    *o += v;
                }
            }
            let n = members.len() as f64;
            for o in out_row.iter_mut() {
                *o /= n;
            }
        }
        Ok(self.push(out, Op::SegmentMean(a, groups)))
    }

    /// `out_r = weights[r] * a_r + constant_r`. The constant is detached.
    pub fn blend(&mut self, a: Var, weights: Vec<f64>, constant: &Matrix) -> Result<Var> {
        let src = self.value(a);
        if weights.len() != src.rows() {
            return Err(dim_err("blend weights", src.rows(), weights.len()));
        }
        if constant.shape() != src.shape() {
            return Err(dim_err("blend constant", src.rows(), constant.rows()));
        }
        let mut out = constant.clone();
        for (r, &w) in weights.iter().enumerate() {
            for (o, v) in out.row_mut(r).iter_mut().zip(src.row(r)) {
                *o += w * v;
            }
        }
        Ok(self.push(out, Op::Blend(a, weights)))
    }

    /// Sum over rows of the Euclidean row norm.
    pub fn row_norm_sum(&mut self, a: Var) -> Var {
        let norms: Vec<f64> = self
            .value(a)
            .iter_rows()
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let total = norms.iter().sum();
        self.push(Matrix::scalar(total), Op::RowNormSum(a, norms))
    }

    /// Mean softmax cross-entropy of `logits` (m x k) against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(dim_err(
                "softmax_cross_entropy labels",
                z.rows(),
                labels.len(),
            ));
        }
        if z.rows() == 0 {
            return Err(LvrError::Data("cross-entropy of an empty batch".into()));
        }
        let k = z.cols();
        let mut probs = Matrix::zeros(z.rows(), k);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(LvrError::Data(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum_exp.ln();
            loss += log_norm - row[y];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - log_norm).exp();
            }
        }
        let mean = loss / z.rows() as f64;
        Ok(self.push(
            Matrix::scalar(mean),
            Op::SoftmaxCrossEntropy(logits, labels, probs),
        ))
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_sum_squares(&mut self, a: Var) -> Var {
        let v = 0.5 * self.value(a).as_slice().iter().map(|x| x * x).sum::<f64>();
        self.push(Matrix::scalar(v), Op::HalfSumSquares(a))
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = self.value(loss);
        if out.shape() != (1, 1) {
            return Err(dim_err(
                "backward: loss must be scalar",
                1,
                out.rows() * out.cols(),
            ));
        }
        if !out[(0, 0)].is_finite() {
            return Err(LvrError::NonFinite(format!("loss = {}", out[(0, 0)])));
        }

        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // leaf adjoints stay in place; interior ones are consumed
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut adj, *row, g.sum_rows());
                    accumulate(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::Scale(a, f) => accumulate(&mut adj, *a, g.map(|x| x * f)),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SegmentMean(a, groups) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (gi, members) in groups.iter().enumerate() {
                        let n = members.len() as f64;
                        for &i in members {
                            for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(gi)) {
                                *o += v / n;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Blend(a, weights) => {
                    let mut ga = g;
                    for (r, &w) in weights.iter().enumerate() {
                        for v in ga.row_mut(r) {
                            *v *= w;
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::RowNormSum(a, norms) => {
                    let upstream = g[(0, 0)];
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (r, &n) in norms.iter().enumerate() {
                        // subgradient 0 at the kink
                        if n > 0.0 {
                            for (o, v) in ga.row_mut(r).iter_mut().zip(src.row(r)) {
                                *o = upstream * v / n;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SoftmaxCrossEntropy(a, labels, probs) => {
                    let scale = g[(0, 0)] / labels.len() as f64;
                    let mut ga = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        ga[(r, y)] -= 1.0;
                    }
                    accumulate(&mut adj, *a, ga.map(|x| x * scale));
                }
                Op::HalfSumSquares(a) => {
                    let upstream = g[(0, 0)];
                    accumulate(&mut adj, *a, self.value(*a).map(|x| x * upstream));
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], var: Var, grad: Matrix) {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}
