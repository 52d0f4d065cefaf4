//! Class-center low-variance regularization for embedding encoders, with a
//! probe-based leakage audit and a seeded ablation harness.
//!
//! The pieces, bottom-up:
//!
//! - [`matrix`] and [`autodiff`]: dense `f64` matrices and a reverse-mode tape.
//! - [`encoder`]: MLP encoder, linear head, exact gradients.
//! - [`lvr`]: running class centers, the distance regularizer, the center loss
//!   and the combined objective.
//! - [`datagen`]: synthetic data with a tunable attribute signal, CSV loading,
//!   stratified splits.
//! - [`trainer`]: seeded mini-batch training, accuracy, embedding export.
//! - [`probe`]: balanced-accuracy probes on frozen embeddings.
//! - [`harness`]: multi-seed experiments, the four-arm ablation, reports.

pub mod autodiff;
pub mod checkpoint;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod lvr;
pub mod matrix;
pub mod optim;
pub mod probe;
pub mod stats;
pub mod trainer;

pub use datagen::{
    generate, load_csv, split, write_csv, CsvSchema, Dataset, ProtectedAttribute, Split,
    SplitFractions, SyntheticSpec,
};
pub use encoder::{gradient, Activation, EncoderConfig, Parameters};
pub use error::{LvrError, Result};
pub use harness::{
    render_report, run_ablation, run_experiment, ArmReport, DataSource, ExperimentConfig,
    ExperimentReport, ReportFormat,
};
pub use lvr::{
    batch_centers, center_loss, regularization_loss, total_loss, CenterState, LossBreakdown,
    UsedCenters,
};
pub use matrix::Matrix;
pub use optim::OptimizerKind;
pub use probe::{balanced_accuracy, train_probes, ProbeConfig, ProbeReport};
pub use stats::MeanStd;
pub use trainer::{evaluate, export_embeddings, train, TrainConfig, TrainReport, TrainedModel};
