//! Trains the regularized encoder next to a plain cross-entropy baseline on the
//! default synthetic data and prints both probe results.
//!
//! cargo run --release -p lvr-core --example quickstart

use lvr_core::harness::{run_arms, Arm};
use lvr_core::{render_report, ExperimentConfig, ReportFormat, TrainConfig};

fn main() -> lvr_core::Result<()> {
    let config = ExperimentConfig::default();
    let arms = [
        Arm {
            name: "cross-entropy".into(),
            train: TrainConfig {
                lambda: 0.0,
                enable_center_loss: false,
                ..config.train.clone()
            },
        },
        Arm {
            name: "class-centers".into(),
            train: config.train.clone(),
        },
    ];
    let report = run_arms(&config, "run", &arms)?;
    print!("{}", render_report(&report, ReportFormat::Table)?);
    Ok(())
}
