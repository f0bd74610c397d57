//! `osmcaa` command-line tool.
//!
//! Exit status is 0 on success, 1 when the configuration or inputs fail
//! validation, and 2 for failures at run time (including a failed gradient
//! check).

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use osmcaa::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "osmcaa",
    version,
    about = "Weighted contrastive metric learning on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset file and print its summary.
    Generate(Common),
    /// Train on a dataset file; writes a checkpoint and a JSON-lines log.
    Train(Common),
    /// Print Recall@K and mAP of a checkpoint on a dataset.
    Evaluate(Common),
    /// Dump the pair weights of one sampled batch.
    Inspect(Common),
    /// Compare analytic gradients with finite differences in every mode.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// baseline, osm or osm-caa.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Checkpoint to continue training from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Comma-separated K values for Recall@K.
    #[arg(long)]
    ks: Option<String>,
    /// Any other config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Random instances per mode.
    #[arg(long, default_value_t = 50)]
    instances: usize,
    /// Adds this amount to one analytic gradient entry (negative control).
    #[arg(long, hide = true, allow_hyphen_values = true)]
    corrupt: Option<f64>,
}

/// Error carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<osmcaa::Error> for Failure {
    fn from(e: osmcaa::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

/// Defaults, then the config file, then `--set`, then the named flags.
fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let invalid = |e: osmcaa::Error| Failure::Validation(e.to_string());
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        cfg.apply_text(&text).map_err(invalid)?;
    }
    for assignment in &common.set {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Failure::Validation(format!("--set expects KEY=VALUE, got `{assignment}`"))
        })?;
        cfg.set(key.trim(), value).map_err(invalid)?;
    }
    let paths = [
        ("dataset", &common.dataset),
        ("checkpoint", &common.checkpoint),
        ("resume", &common.resume),
        ("out", &common.out),
        ("log", &common.log),
    ];
    for (key, path) in paths {
        if let Some(p) = path {
            cfg.set(key, &p.to_string_lossy()).map_err(invalid)?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string()).map_err(invalid)?;
    }
    if let Some(mode) = &common.mode {
        cfg.set("mode", mode).map_err(invalid)?;
    }
    if let Some(ks) = &common.ks {
        cfg.set("ks", ks).map_err(invalid)?;
    }
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate(c) => commands::generate(&load_config(&c)?),
        Command::Train(c) => commands::train(&load_config(&c)?),
        Command::Evaluate(c) => commands::evaluate(&load_config(&c)?),
        Command::Inspect(c) => commands::inspect(&load_config(&c)?),
        Command::Gradcheck(g) => {
            commands::gradcheck(&load_config(&g.common)?, g.instances, g.corrupt)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
