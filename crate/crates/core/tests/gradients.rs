mod common;

use common::*;
use lvr_core::lvr::{CenterState, ObjectiveWeights};
use lvr_core::{Matrix, Parameters};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn check(
    params: &Parameters,
    inputs: &Matrix,
    labels: &[usize],
    state: &CenterState,
    weights: ObjectiveWeights,
) -> f64 {
    let analytic = analytic_gradient(params, inputs, labels, state, weights);
    let numeric = finite_difference(params, STEP, |p| {
        objective_value(p, inputs, labels, state, weights)
    });
    assert_eq!(analytic.len(), numeric.len());
    assert!(
        analytic.iter().any(|g| g.abs() > 1e-8),
        "gradient is all zero"
    );
    max_relative_error(&analytic, &numeric)
}

#[test]
fn full_objective_matches_finite_differences() {
    let weights = ObjectiveWeights {
        lambda: 0.1,
        center_loss: true,
    };
    for cfg in gradient_configs() {
        for seed in 0..3 {
            let cfg = lvr_core::EncoderConfig {
                init_seed: seed,
                ..cfg.clone()
            };
            let params = jittered_params(&cfg, cfg.init_seed + 42);
            let (inputs, labels, state) = mixed_batch(&cfg, seed, 0.3);
            let err = check(&params, &inputs, &labels, &state, weights);
            assert!(
                err < TOLERANCE,
                "{cfg:?} seed {seed}: relative error {err:e}"
            );
        }
    }
}

#[test]
fn every_term_combination_matches() {
    let cfg = gradient_configs().remove(0);
    let params = jittered_params(&cfg, cfg.init_seed + 42);
    for omega in [0.0, 0.3, 1.0] {
        let (inputs, labels, state) = mixed_batch(&cfg, 11, omega);
        for lambda in [0.0, 0.1, 2.0] {
            for center_loss in [false, true] {
                let weights = ObjectiveWeights {
                    lambda,
                    center_loss,
                };
                let err = check(&params, &inputs, &labels, &state, weights);
                assert!(
                    err < TOLERANCE,
                    "omega {omega} lambda {lambda} lc {center_loss}: {err:e}"
                );
            }
        }
    }
}

#[test]
fn fresh_state_matches() {
    let weights = ObjectiveWeights {
        lambda: 0.5,
        center_loss: true,
    };
    for cfg in gradient_configs() {
        let params = jittered_params(&cfg, cfg.init_seed + 42);
        let (inputs, labels, _) = mixed_batch(&cfg, 3, 0.3);
        let state = CenterState::new(cfg.n_classes, cfg.embedding_dim, 0.3).unwrap();
        let err = check(&params, &inputs, &labels, &state, weights);
        assert!(err < TOLERANCE, "{cfg:?}: {err:e}");
    }
}

#[test]
fn tape_loss_equals_plain_loss() {
    let weights = ObjectiveWeights {
        lambda: 0.1,
        center_loss: true,
    };
    for cfg in gradient_configs() {
        let params = jittered_params(&cfg, cfg.init_seed + 42);
        let (inputs, labels, state) = mixed_batch(&cfg, 5, 0.3);
        let (value, _) = lvr_core::gradient(&params, |tape, vars| {
            Ok(lvr_core::lvr::objective(tape, vars, &inputs, &labels, &state, weights)?.total)
        })
        .unwrap();
        let plain = objective_value(&params, &inputs, &labels, &state, weights);
        assert!(
            (value - plain).abs() <= 1e-12 * plain.abs().max(1.0),
            "{value} vs {plain}"
        );
    }
}
