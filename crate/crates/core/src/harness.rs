//! Experiment orchestration: seeded multi-run experiments, the four-arm
//! (omega, center loss) ablation, and report rendering.
//!
//! Seeds: run `i` of an experiment uses the offset `seed + i`, added to the
//! data seed, the encoder init seed, the shuffle seed and the probe seed base.
//! Every arm sees the same offsets, so arms of one ablation share datasets and
//! initial weights.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, CsvSchema, Dataset, Split, SplitFractions, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{LvrError, Result};
use crate::lvr::LossBreakdown;
use crate::probe::{self, ProbeConfig};
use crate::stats::MeanStd;
use crate::trainer::{self, TrainConfig};

pub const DEFAULT_N_SEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf, schema: CsvSchema },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Used when the data carries no split tags of its own.
    pub split: SplitFractions,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub n_seeds: usize,
    pub seed: u64,
    /// When set, per-run embedding exports are written below this directory.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            split: SplitFractions::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            n_seeds: DEFAULT_N_SEEDS,
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Strict JSON parse: unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LvrError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(LvrError::Config("n_seeds must be at least 1".into()));
        }
        self.split.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                if spec.input_dim != self.encoder.input_dim {
                    return Err(LvrError::Config(format!(
                        "encoder input_dim {} does not match synthetic input_dim {}",
                        self.encoder.input_dim, spec.input_dim
                    )));
                }
                if spec.n_classes > self.encoder.n_classes {
                    return Err(LvrError::Config(format!(
                        "encoder n_classes {} is below the data's {}",
                        self.encoder.n_classes, spec.n_classes
                    )));
                }
            }
            DataSource::Csv { path, .. } => {
                if !path.exists() {
                    return Err(LvrError::Config(format!(
                        "data file {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    pub name: String,
    pub chance: f64,
    /// Mean balanced accuracy over the run's probes.
    pub balanced_accuracy: f64,
    pub probe_std: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed_index: usize,
    pub seed: u64,
    /// Accuracy on the test split (val, then train, when test is empty).
    pub task_accuracy: f64,
    pub train_accuracy: f64,
    pub final_epoch: LossBreakdown,
    pub probes: Vec<AttributeScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeAggregate {
    pub name: String,
    pub chance: f64,
    pub balanced_accuracy: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub task_accuracy: MeanStd,
    pub probes: Vec<AttributeAggregate>,
}

impl Aggregate {
    fn of(runs: &[RunRecord]) -> Option<Aggregate> {
        let first = runs.first()?;
        let task: Vec<f64> = runs.iter().map(|r| r.task_accuracy).collect();
        let probes = first
            .probes
            .iter()
            .enumerate()
            .map(|(a, attr)| {
                let values: Vec<f64> = runs.iter().map(|r| r.probes[a].balanced_accuracy).collect();
                AttributeAggregate {
                    name: attr.name.clone(),
                    chance: attr.chance,
                    balanced_accuracy: MeanStd::of(&values),
                }
            })
            .collect();
        Some(Aggregate {
            task_accuracy: MeanStd::of(&task),
            probes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "state", content = "error")]
pub enum ArmStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub lambda: f64,
    pub omega: f64,
    pub center_loss: bool,
    pub status: ArmStatus,
    pub runs: Vec<RunRecord>,
    /// Absent for failed arms.
    pub aggregate: Option<Aggregate>,
}

impl ArmReport {
    pub fn is_ok(&self) -> bool {
        self.status == ArmStatus::Ok
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub kind: String,
    pub config: ExperimentConfig,
    pub arms: Vec<ArmReport>,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

/// One training configuration evaluated across all seeds.
#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub train: TrainConfig,
}

/// The four ablation arms: (omega, center loss) each off or at the configured value.
pub fn ablation_arms(base: &TrainConfig) -> Vec<Arm> {
    let arm = |name: &str, omega_on: bool, center: bool| Arm {
        name: name.into(),
        train: TrainConfig {
            omega: if omega_on { base.omega } else { 0.0 },
            enable_center_loss: center,
            ..base.clone()
        },
    };
    vec![
        arm("no-omega-no-lc", false, false),
        arm("no-lc", true, false),
        arm("no-omega", false, true),
        arm("full", true, true),
    ]
}

fn offset_seed(config: &ExperimentConfig, index: usize) -> u64 {
    config.seed.wrapping_add(index as u64)
}

fn load_data(config: &ExperimentConfig, offset: u64) -> Result<Dataset> {
    match &config.data {
        DataSource::Synthetic(spec) => {
            let spec = SyntheticSpec {
                seed: spec.seed.wrapping_add(offset),
                ..spec.clone()
            };
            datagen::split(&datagen::generate(&spec)?, config.split, offset)
        }
        DataSource::Csv { path, schema } => {
            let data = datagen::load_csv(path, schema)?;
            if schema.split.is_some() {
                Ok(data)
            } else {
                datagen::split(&data, config.split, offset)
            }
        }
    }
}

fn run_one(
    config: &ExperimentConfig,
    arm: &Arm,
    seed_index: usize,
    data: &Dataset,
) -> Result<RunRecord> {
    let offset = offset_seed(config, seed_index);
    let encoder = EncoderConfig {
        init_seed: config.encoder.init_seed.wrapping_add(offset),
        ..config.encoder.clone()
    };
    let train_cfg = TrainConfig {
        shuffle_seed: arm.train.shuffle_seed.wrapping_add(offset),
        ..arm.train.clone()
    };
    let model = trainer::train(data, &encoder, &train_cfg)?;
    let acc = &model.report.accuracy;
    let task_accuracy = acc
        .test
        .or(acc.val)
        .or(acc.train)
        .ok_or_else(|| LvrError::Data("no split to evaluate".into()))?;

    let embedded = trainer::embed_split(&model.params, data, Split::Train)?;
    if let Some(dir) = &config.output_dir {
        let arm_dir = dir.join(&arm.name);
        fs::create_dir_all(&arm_dir).map_err(|e| LvrError::io(&arm_dir, e))?;
        trainer::write_embeddings(
            &embedded,
            &arm_dir.join(format!("seed{seed_index}_embeddings.csv")),
        )?;
    }
    let probe_cfg = ProbeConfig {
        seed_base: config.probe.seed_base.wrapping_add(offset),
        ..config.probe.clone()
    };
    let report = probe::train_probes(&embedded, &probe_cfg)?;
    Ok(RunRecord {
        seed_index,
        seed: offset,
        task_accuracy,
        train_accuracy: acc.train.unwrap_or(f64::NAN),
        final_epoch: *model.report.epochs.last().expect("epochs >= 1"),
        probes: report
            .attributes
            .into_iter()
            .map(|a| AttributeScore {
                name: a.name,
                chance: a.chance,
                balanced_accuracy: a.mean,
                probe_std: a.std,
                degenerate: a.degenerate,
            })
            .collect(),
    })
}

/// Runs every arm for every seed. Data loading failures abort; per-run
/// failures mark the arm as failed and the report is still produced.
pub fn run_arms(config: &ExperimentConfig, kind: &str, arms: &[Arm]) -> Result<ExperimentReport> {
    config.validate()?;
    let datasets = (0..config.n_seeds)
        .map(|i| load_data(config, offset_seed(config, i)))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..arms.len())
        .flat_map(|a| (0..config.n_seeds).map(move |s| (a, s)))
        .collect();
    let results: Vec<Result<RunRecord>> = jobs
        .par_iter()
        .map(|&(a, s)| run_one(config, &arms[a], s, &datasets[s]))
        .collect();

    let mut results = results.into_iter();
    let arm_reports = arms
        .iter()
        .map(|arm| {
            let mut runs = Vec::with_capacity(config.n_seeds);
            let mut failure = None;
            for seed_index in 0..config.n_seeds {
                match results.next().expect("one result per job") {
                    Ok(r) => runs.push(r),
                    Err(e) => {
                        log::error!("arm {} seed {seed_index} failed: {e}", arm.name);
                        failure.get_or_insert(format!("seed {seed_index}: {e}"));
                    }
                }
            }
            let (status, aggregate) = match failure {
                Some(msg) => (ArmStatus::Failed(msg), None),
                None => (ArmStatus::Ok, Aggregate::of(&runs)),
            };
            ArmReport {
                name: arm.name.clone(),
                lambda: arm.train.lambda,
                omega: arm.train.omega,
                center_loss: arm.train.enable_center_loss,
                status,
                runs,
                aggregate,
            }
        })
        .collect();

    Ok(ExperimentReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: kind.into(),
        config: config.clone(),
        arms: arm_reports,
    })
}

/// A single arm with the configuration as given.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let arm = Arm {
        name: "run".into(),
        train: config.train.clone(),
    };
    run_arms(config, "run", &[arm])
}

/// The four (omega, center loss) arms over shared seeds and data.
pub fn run_ablation(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_arms(config, "ablation", &ablation_arms(&config.train))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

impl FromStr for ReportFormat {
    type Err = LvrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            other => Err(LvrError::Config(format!(
                "unknown report format '{other}', expected table or json"
            ))),
        }
    }
}

fn pct(ms: &MeanStd) -> String {
    format!("{:.1}_{{{:.1}}}", 100.0 * ms.mean, 100.0 * ms.std)
}

/// Renders a report as a text table (percentages, `mean_{std}`) or pretty JSON.
pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Table => Ok(render_table(report)),
    }
}

fn render_table(report: &ExperimentReport) -> String {
    let attrs: Vec<(String, f64)> = report
        .arms
        .iter()
        .find_map(|a| a.aggregate.as_ref())
        .map(|agg| {
            agg.probes
                .iter()
                .map(|p| (p.name.clone(), p.chance))
                .collect()
        })
        .unwrap_or_default();

    let mut header = vec![
        "arm".to_string(),
        "lambda".to_string(),
        "omega".to_string(),
        "L_c".to_string(),
        "Task↑".to_string(),
    ];
    header.extend(
        attrs
            .iter()
            .map(|(name, chance)| format!("Probe↓ {name} (chance {:.1})", 100.0 * chance)),
    );

    let rows: Vec<Vec<String>> = report
        .arms
        .iter()
        .map(|arm| {
            let mut row = vec![
                arm.name.clone(),
                format!("{}", arm.lambda),
                format!("{}", arm.omega),
                if arm.center_loss { "on" } else { "off" }.to_string(),
            ];
            match (&arm.status, &arm.aggregate) {
                (ArmStatus::Ok, Some(agg)) => {
                    row.push(pct(&agg.task_accuracy));
                    row.extend(agg.probes.iter().map(|p| pct(&p.balanced_accuracy)));
                }
                (ArmStatus::Failed(msg), _) => row.push(format!("FAILED: {msg}")),
                (ArmStatus::Ok, None) => row.push("FAILED: no runs".into()),
            }
            row
        })
        .collect();

    let n_cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        // a FAILED cell spans the metric columns, so it does not size them
        for (w, cell) in widths.iter_mut().zip(row.iter().take(n_cols)) {
            if !cell.starts_with("FAILED") {
                *w = (*w).max(cell.chars().count());
            }
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let w = widths.get(i).copied().unwrap_or(0);
                format!("{c:<w$}")
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header, &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&rule, &mut out);
    for row in &rows {
        line(row, &mut out);
    }
    let _ = writeln!(
        out,
        "{} seed(s), values in percent as mean_{{std}}",
        report.config.n_seeds
    );
    out
}
