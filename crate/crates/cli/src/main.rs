//! `dptab`: prepare data, train with a privacy budget, sample, and evaluate.
//!
//! Every command resolves a run configuration from an optional TOML file
//! plus flag overrides, and writes a JSON report carrying the config hash,
//! the seed and the SHA-256 digest of every file it read or wrote.
//!
//! Exit codes: 0 success, 1 internal error, 2 input error, 3 privacy stop,
//! 4 generation failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

/// Overrides the output directory when `--out` is not given.
pub const OUTPUT_DIR_ENV: &str = "DPTAB_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    PrivacyStop(String),
    #[error("{0}")]
    Generation(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Input(_) => 2,
            CliError::PrivacyStop(_) => 3,
            CliError::Generation(_) => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dptab", version, about = "Differentially private tabular data synthesis")]
struct Cli {
    /// TOML config of dotted keys, e.g. `loss.alpha = 0.65`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Config override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_parser = parse_key_value)]
    set: Vec<(String, String)>,

    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory; falls back to $DPTAB_OUTPUT_DIR, then the current directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Infer or validate a schema and write an 80:20 train/test split.
    Prepare(PrepareArgs),
    /// Two-stage fine-tuning; writes a checkpoint and a training report.
    Train(TrainArgs),
    /// Generate synthetic rows from a checkpoint.
    Sample(SampleArgs),
    /// Fidelity, privacy, utility and fairness metrics.
    Evaluate(EvaluateArgs),
    /// Epsilon for a noise level, or the noise level for a budget.
    Accountant(AccountantArgs),
    /// Controlled-generation sweep over fair fractions.
    FairnessRun(FairnessArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub csv: PathBuf,
    /// Validate against this schema instead of inferring one.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub sensitive: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Held-out rows for the perplexity figure in the report.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Continue from a checkpoint; its privacy ledger carries over.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stage-2 epochs.
    #[arg(long)]
    pub epochs: Option<f64>,
    #[arg(long)]
    pub non_private: bool,
    #[arg(long)]
    pub single_stage: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub retries: Option<u32>,
    /// Fixed value `Feature=Value`; repeatable.
    #[arg(long = "fix", value_parser = parse_key_value)]
    pub fix: Vec<(String, String)>,
    /// Fraction of rows generated under demographic-parity quotas.
    #[arg(long, conflicts_with = "fix")]
    pub fair_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub synthetic: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Adds test-set perplexity and a format-compliance probe.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AccountantArgs {
    /// Sampling rate.
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub steps: u64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long, required_unless_present = "epsilon", conflicts_with = "epsilon")]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FairnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Real test rows for downstream accuracy.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated fair fractions; overrides `fairness.rhos`.
    #[arg(long, value_delimiter = ',')]
    pub rhos: Option<Vec<f64>>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn output_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    let mut overrides = cli.set;
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let out = output_dir(cli.out);
    let ctx = |extra: Vec<(String, String)>| -> Result<commands::Context, CliError> {
        let mut all = overrides.clone();
        all.extend(extra);
        let config = config::RunConfig::resolve(cli.config.as_deref(), &all)?;
        Ok(commands::Context { config, out: out.clone() })
    };
    match cli.command {
        Command::Prepare(a) => {
            let mut extra = Vec::new();
            push_str(&mut extra, "prepare.target", &a.target);
            push_str(&mut extra, "prepare.sensitive", &a.sensitive);
            commands::prepare(&ctx(extra)?, &a)
        }
        Command::Train(a) => {
            let mut extra = Vec::new();
            push(&mut extra, "privacy.epsilon_target", a.epsilon);
            push(&mut extra, "privacy.delta", a.delta);
            push(&mut extra, "privacy.clip_norm", a.clip_norm);
            push(&mut extra, "stage2.expected_batch_size", a.batch_size);
            push(&mut extra, "stage2.epochs", a.epochs);
            if a.non_private {
                extra.push(("stage2.non_private".into(), "true".into()));
            }
            if a.single_stage {
                extra.push(("train.single_stage".into(), "true".into()));
            }
            commands::train(&ctx(extra)?, &a)
        }
        Command::Sample(a) => {
            let mut extra = Vec::new();
            push(&mut extra, "sample.n", a.n);
            push(&mut extra, "sample.temperature", a.temperature);
            push(&mut extra, "sample.max_retries", a.retries);
            commands::sample(&ctx(extra)?, &a)
        }
        Command::Evaluate(a) => commands::evaluate(&ctx(Vec::new())?, &a),
        Command::Accountant(a) => commands::accountant(&a),
        Command::FairnessRun(a) => {
            let mut extra = Vec::new();
            push(&mut extra, "sample.n", a.n);
            if let Some(r) = &a.rhos {
                let list: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
                extra.push(("fairness.rhos".into(), format!("[{}]", list.join(", "))));
            }
            commands::fairness_run(&ctx(extra)?, &a)
        }
    }
}

fn push<T: std::fmt::Debug>(v: &mut Vec<(String, String)>, key: &str, value: Option<T>) {
    if let Some(x) = value {
        v.push((key.to_string(), format!("{x:?}")));
    }
}

fn push_str(v: &mut Vec<(String, String)>, key: &str, value: &Option<String>) {
    if let Some(s) = value {
        v.push((key.to_string(), format!("{s:?}")));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
