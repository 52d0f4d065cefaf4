use serde::{Deserialize, Serialize};

use crate::error::{LvrError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First-order optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: i32,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(LvrError::Config(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                step: 0,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            },
        })
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self {
            Optimizer::Sgd { lr } => {
                if *lr == 0.0 {
                    return;
                }
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { lr, step, m, v } => {
                *step += 1;
                let bias1 = 1.0 - ADAM_BETA1.powi(*step);
                let bias2 = 1.0 - ADAM_BETA2.powi(*step);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    if *lr != 0.0 {
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        params[i] -= *lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
    }
}
