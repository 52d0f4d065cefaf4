//! Class-center regularization.
//!
//! Per batch, each present class gets a center: the mean of its embeddings,
//! blended with the class's stored center from earlier batches,
//!
//! ```text
//! C_i = (1 - omega) * mean(Z_i) + omega * C_i_prev
//! ```
//!
//! Classes without history use the plain batch mean (a single sample becomes
//! its own center). Classes absent from the batch are skipped and keep their
//! stored center. The regularizer is the sum over samples of the Euclidean
//! distance to their class center, and the center loss is the head's
//! cross-entropy on the centers themselves. The objective is
//!
//! ```text
//! total = L_task + lambda * L_reg + L_center
//! ```
//!
//! Gradients flow through the batch mean; the stored history is a constant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{ParamVars, Parameters};
use crate::error::{LvrError, Result};
use crate::matrix::Matrix;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_OMEGA: f64 = 0.3;

/// Running per-class centers for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    centers: Matrix,
    initialized: Vec<bool>,
    omega: f64,
}

impl CenterState {
    pub fn new(n_classes: usize, dim: usize, omega: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(LvrError::Config(format!(
                "omega must lie in [0, 1], got {omega}"
            )));
        }
        Ok(CenterState {
            centers: Matrix::zeros(n_classes, dim),
            initialized: vec![false; n_classes],
            omega,
        })
    }

    /// Rebuilds a state from its parts, e.g. when loading a checkpoint.
    pub fn from_parts(centers: Matrix, initialized: Vec<bool>, omega: f64) -> Result<Self> {
        if centers.rows() != initialized.len() {
            return Err(LvrError::Dimension {
                context: "CenterState::from_parts",
                expected: centers.rows(),
                actual: initialized.len(),
            });
        }
        let mut s = CenterState::new(centers.rows(), centers.cols(), omega)?;
        s.centers = centers;
        s.initialized = initialized;
        Ok(s)
    }

    pub fn n_classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    /// Stored center for `class`, if it has ever been seen.
    pub fn center(&self, class: usize) -> Option<&[f64]> {
        self.initialized
            .get(class)
            .copied()
            .unwrap_or(false)
            .then(|| self.centers.row(class))
    }

    fn commit(&mut self, used: &UsedCenters) {
        for (row, &class) in used.classes.iter().enumerate() {
            self.centers
                .row_mut(class)
                .copy_from_slice(used.centers.row(row));
            self.initialized[class] = true;
        }
    }
}

/// Centers used for the current batch, one row per present class (ascending id).
#[derive(Clone, Debug, PartialEq)]
pub struct UsedCenters {
    classes: Vec<usize>,
    centers: Matrix,
}

impl UsedCenters {
    pub fn new(classes: Vec<usize>, centers: Matrix) -> Result<Self> {
        if classes.len() != centers.rows() {
            return Err(LvrError::Dimension {
                context: "UsedCenters::new",
                expected: classes.len(),
                actual: centers.rows(),
            });
        }
        Ok(UsedCenters { classes, centers })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn matrix(&self) -> &Matrix {
        &self.centers
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|row| self.centers.row(row))
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Grouping of a batch by class, plus the blend coefficients for each group.
#[derive(Debug)]
struct CenterPlan {
    classes: Vec<usize>,
    members: Vec<Vec<usize>>,
    /// Weight on the batch mean: `1 - omega`, or 1 for classes without history.
    weights: Vec<f64>,
    /// `omega * C_prev` per present class (zero rows without history).
    history: Matrix,
    /// For every sample, the row of its class in `classes`.
    sample_rows: Vec<usize>,
}

impl CenterPlan {
    fn new(labels: &[usize], dim: usize, state: &CenterState) -> Result<Self> {
        if labels.is_empty() {
            return Err(LvrError::Data("class centers of an empty batch".into()));
        }
        if state.dim() != dim {
            return Err(LvrError::Dimension {
                context: "batch_centers: embedding width",
                expected: state.dim(),
                actual: dim,
            });
        }
        let k = state.n_classes();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(LvrError::Data(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            by_class[y].push(i);
        }

        let mut classes = Vec::new();
        let mut members = Vec::new();
        let mut row_of_class = vec![usize::MAX; k];
        for (class, idx) in by_class.into_iter().enumerate() {
            if !idx.is_empty() {
                row_of_class[class] = classes.len();
                classes.push(class);
                members.push(idx);
            }
        }

        let omega = state.omega;
        let mut weights = Vec::with_capacity(classes.len());
        let mut history = Matrix::zeros(classes.len(), dim);
        for (row, &class) in classes.iter().enumerate() {
            match state.center(class) {
                Some(prev) => {
                    weights.push(1.0 - omega);
                    for (h, p) in history.row_mut(row).iter_mut().zip(prev) {
                        *h = omega * p;
                    }
                }
                None => weights.push(1.0),
            }
        }
        let sample_rows = labels.iter().map(|&y| row_of_class[y]).collect();
        Ok(CenterPlan {
            classes,
            members,
            weights,
            history,
            sample_rows,
        })
    }

    fn build(self, tape: &mut Tape, embeddings: Var) -> Result<(Var, Vec<usize>, Vec<usize>)> {
        let means = tape.segment_mean(embeddings, self.members)?;
        let used = tape.blend(means, self.weights, &self.history)?;
        Ok((used, self.classes, self.sample_rows))
    }
}

fn check_batch(z: &Matrix, labels: &[usize]) -> Result<()> {
    if z.rows() != labels.len() {
        return Err(LvrError::Dimension {
            context: "embedding rows vs labels",
            expected: z.rows(),
            actual: labels.len(),
        });
    }
    if !z.is_finite() {
        return Err(LvrError::NonFinite("embeddings".into()));
    }
    Ok(())
}

/// Centers for the classes present in this batch, and the state after storing them.
pub fn batch_centers(
    z: &Matrix,
    labels: &[usize],
    state: &CenterState,
) -> Result<(UsedCenters, CenterState)> {
    check_batch(z, labels)?;
    let plan = CenterPlan::new(labels, z.cols(), state)?;
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let (used, classes, _) = plan.build(&mut tape, zv)?;
    let used = UsedCenters::new(classes, tape.value(used).clone())?;
    let mut next = state.clone();
    next.commit(&used);
    Ok((used, next))
}

/// Sum over samples of the Euclidean distance to the sample's class center.
pub fn regularization_loss(z: &Matrix, labels: &[usize], used: &UsedCenters) -> Result<f64> {
    check_batch(z, labels)?;
    let mut total = 0.0;
    for (row, &y) in z.iter_rows().zip(labels) {
        let center = used
            .get(y)
            .ok_or_else(|| LvrError::Data(format!("no center for class {y}")))?;
        if center.len() != row.len() {
            return Err(LvrError::Dimension {
                context: "regularization_loss: center width",
                expected: row.len(),
                actual: center.len(),
            });
        }
        total += row
            .iter()
            .zip(center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total)
}

/// Mean head cross-entropy of each used center against its own class id.
pub fn center_loss(used: &UsedCenters, params: &Parameters) -> Result<f64> {
    if used.is_empty() {
        return Err(LvrError::Data(
            "center loss needs at least one center".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.to_graph(&mut tape);
    let c = tape.leaf(used.centers.clone());
    let logits = vars.classify(&mut tape, c)?;
    let loss = tape.softmax_cross_entropy(logits, used.classes.clone())?;
    Ok(tape.value(loss)[(0, 0)])
}

/// Components of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub reg_loss: f64,
    pub center_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(task: f64, reg: f64, center: f64, lambda: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("task", task),
        ("reg", reg),
        ("center", center),
        ("lambda", lambda),
    ] {
        if !v.is_finite() {
            return Err(LvrError::NonFinite(format!("{name} loss component = {v}")));
        }
    }
    if lambda < 0.0 {
        return Err(LvrError::Config(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(LossBreakdown {
        task_loss: task,
        reg_loss: reg,
        center_loss: center,
        lambda,
        total: task + lambda * reg + center,
    })
}

/// Weighting of the objective's terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda: f64,
    pub center_loss: bool,
}

/// Nodes of one batch's objective on a tape.
#[derive(Debug)]
pub struct ObjectiveGraph {
    pub total: Var,
    pub task: Var,
    pub reg: Var,
    /// Present only when the center loss is enabled.
    pub center: Option<Var>,
    pub used_centers: Var,
    pub classes: Vec<usize>,
}

impl ObjectiveGraph {
    pub fn breakdown(&self, tape: &Tape, lambda: f64) -> Result<LossBreakdown> {
        let v = |var: Var| tape.value(var)[(0, 0)];
        let center = self.center.map_or(0.0, v);
        total_loss(v(self.task), v(self.reg), center, lambda)
    }

    /// State after storing this batch's (detached) centers.
    pub fn next_state(&self, tape: &Tape, state: &CenterState) -> Result<CenterState> {
        let used = UsedCenters::new(self.classes.clone(), tape.value(self.used_centers).clone())?;
        let mut next = state.clone();
        next.commit(&used);
        Ok(next)
    }
}

/// Builds `L_task + lambda * L_reg (+ L_center)` for one batch on `tape`.
pub fn objective(
    tape: &mut Tape,
    vars: &ParamVars,
    inputs: &Matrix,
    labels: &[usize],
    state: &CenterState,
    weights: ObjectiveWeights,
) -> Result<ObjectiveGraph> {
    if inputs.rows() != labels.len() {
        return Err(LvrError::Dimension {
            context: "objective: input rows vs labels",
            expected: inputs.rows(),
            actual: labels.len(),
        });
    }
    let x = tape.leaf(inputs.clone());
    let z = vars.forward(tape, x)?;
    let logits = vars.classify(tape, z)?;
    let task = tape.softmax_cross_entropy(logits, labels.to_vec())?;

    let plan = CenterPlan::new(labels, tape.value(z).cols(), state)?;
    let (used, classes, sample_rows) = plan.build(tape, z)?;
    let assigned = tape.gather_rows(used, sample_rows)?;
    let diff = tape.sub(z, assigned)?;
    let reg = tape.row_norm_sum(diff);

    let weighted_reg = tape.scale(reg, weights.lambda);
    let mut total = tape.add(task, weighted_reg)?;
    let center = if weights.center_loss {
        let center_logits = vars.classify(tape, used)?;
        let lc = tape.softmax_cross_entropy(center_logits, classes.clone())?;
        total = tape.add(total, lc)?;
        Some(lc)
    } else {
        None
    };
    Ok(ObjectiveGraph {
        total,
        task,
        reg,
        center,
        used_centers: used,
        classes,
    })
}
