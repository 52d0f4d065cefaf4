use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lvr_core::trainer::load_embeddings;
use lvr_core::{
    generate, render_report, run_ablation, run_experiment, train_probes, write_csv,
    ExperimentConfig, LvrError, ProbeConfig, ProbeReport, ReportFormat, SyntheticSpec,
};

/// Class-center regularization experiments on synthetic or CSV data.
#[derive(Parser)]
#[command(name = "lvr-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and probe the configured method over all seeds.
    Run(ExperimentArgs),
    /// Run the four (omega, center loss) ablation arms on shared seeds.
    Ablate(ExperimentArgs),
    /// Probe an embedding CSV for protected-attribute leakage.
    Probe {
        #[arg(long)]
        embeddings: PathBuf,
        /// Probe configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a synthetic dataset as CSV.
    Gen {
        /// Generator spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write report.json (and per-run embeddings) here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Output format on stdout.
    #[arg(long, default_value = "table")]
    format: ReportFormat,
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<LvrError> for Failure {
    fn from(e: LvrError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_config(path)?)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn write_report(dir: &Path, name: &str, json: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, json).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn experiment(args: ExperimentArgs, ablate: bool) -> Result<(), Failure> {
    let mut config = ExperimentConfig::from_json(&read_config(&args.config)?)
        .map_err(|e| Failure::Validation(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.overrides.seed {
        config.seed = seed;
    }
    if let Some(dir) = args.overrides.out_dir {
        config.output_dir = Some(dir);
    }
    config.validate()?;

    let report = if ablate {
        run_ablation(&config)?
    } else {
        run_experiment(&config)?
    };
    let json = render_report(&report, ReportFormat::Json)?;
    if let Some(dir) = &config.output_dir {
        write_report(dir, "report.json", &json)?;
    }
    print!("{}", render_report(&report, args.overrides.format)?);

    let failed: Vec<&str> = report
        .arms
        .iter()
        .filter(|a| !a.is_ok())
        .map(|a| a.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "arm(s) failed: {}",
            failed.join(", ")
        )))
    }
}

fn probe_table(report: &ProbeReport) -> String {
    let mut out = format!(
        "{:<16}  {:>7}  {:>14}  {:>6}  {:>6}\n",
        "attribute", "chance", "BA mean_{std}", "train", "test"
    );
    for a in &report.attributes {
        let ba = format!("{:.1}_{{{:.1}}}", 100.0 * a.mean, 100.0 * a.std);
        let _ = writeln!(
            out,
            "{:<16}  {:>7.1}  {:>14}  {:>6}  {:>6}{}",
            a.name,
            100.0 * a.chance,
            ba,
            a.n_train,
            a.n_test,
            if a.degenerate { "  (single value)" } else { "" }
        );
    }
    let _ = writeln!(
        out,
        "{} probe(s) per attribute, hidden width {}, values in percent",
        report.config.n_probes, report.hidden_dim
    );
    out
}

fn probe(embeddings: PathBuf, config: PathBuf, overrides: Overrides) -> Result<(), Failure> {
    let mut cfg: ProbeConfig = parse(&config)?;
    if let Some(seed) = overrides.seed {
        cfg.seed_base = seed;
    }
    cfg.validate()?;
    let data = load_embeddings(&embeddings).map_err(|e| match e {
        LvrError::Io { .. } => Failure::Validation(e.to_string()),
        other => other.into(),
    })?;
    let report = train_probes(&data, &cfg)?;
    let mut json = serde_json::to_string_pretty(&report).map_err(LvrError::from)?;
    json.push('\n');
    if let Some(dir) = &overrides.out_dir {
        write_report(dir, "probe_report.json", &json)?;
    }
    match overrides.format {
        ReportFormat::Json => print!("{json}"),
        ReportFormat::Table => print!("{}", probe_table(&report)),
    }
    Ok(())
}

fn gen(spec_path: PathBuf, out: PathBuf, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec: SyntheticSpec = parse(&spec_path)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    write_csv(&data, &out)?;
    log::info!("wrote {} rows to {}", data.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(args) => experiment(args, false),
        Command::Ablate(args) => experiment(args, true),
        Command::Probe {
            embeddings,
            config,
            overrides,
        } => probe(embeddings, config, overrides),
        Command::Gen { spec, out, seed } => gen(spec, out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
