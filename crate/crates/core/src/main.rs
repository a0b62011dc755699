use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mran::cli::{cmd_ablate, cmd_gradcheck, cmd_synth, cmd_train, format_ablation, format_gradcheck, format_summary};
use mran::config::ExperimentConfig;
use mran::Result;

/// Mixup regularized adversarial networks for multi-domain text classification.
#[derive(Parser)]
#[command(name = "mran", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated training; writes metrics, checkpoints and a summary.
    Train(RunArgs),
    /// Full model and every single-term ablation on identical folds.
    Ablate(RunArgs),
    /// Finite-difference check of every loss term on a tiny model.
    Gradcheck(GradArgs),
    /// Writes the synthetic task as review files.
    Synth(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use the synthetic multi-domain task.
    #[arg(long)]
    synth: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Switch off a mixup term: dm, cm, lcm or ucm (repeatable).
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other configuration key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Check only this term.
    #[arg(long)]
    term: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
}

fn base_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = path {
        cfg.apply_file(p)?;
    }
    Ok(cfg)
}

fn set_opt<T: ToString>(cfg: &mut ExperimentConfig, key: &str, value: &Option<T>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn run_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = base_config(&a.config)?;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| mran::MranError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    set_opt(&mut cfg, "data_dir", &a.data_dir.as_ref().map(|p| p.display()))?;
    if a.synth {
        cfg.set("synth", "true")?;
    }
    set_opt(&mut cfg, "seed", &a.seed)?;
    set_opt(&mut cfg, "repeats", &a.repeats)?;
    set_opt(&mut cfg, "max_epochs", &a.max_epochs)?;
    set_opt(&mut cfg, "batch_size", &a.batch_size)?;
    set_opt(&mut cfg, "dropout", &a.dropout)?;
    if !a.ablate.is_empty() {
        cfg.set("ablate", &a.ablate.join(","))?;
    }
    set_opt(&mut cfg, "output_dir", &a.out.as_ref().map(|p| p.display()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => {
            let cfg = run_config(&a)?;
            let set = cmd_train(&cfg)?;
            print!("{}", format_summary(&set, &cfg));
        }
        Command::Ablate(a) => {
            let cfg = run_config(&a)?;
            print!("{}", format_ablation(&cmd_ablate(&cfg)?));
        }
        Command::Synth(a) => {
            let cfg = run_config(&a)?;
            println!("wrote {}", cmd_synth(&cfg)?.display());
        }
        Command::Gradcheck(a) => {
            let mut cfg = base_config(&a.config)?;
            set_opt(&mut cfg, "seed", &a.seed)?;
            set_opt(&mut cfg, "dropout", &a.dropout)?;
            let checks = cmd_gradcheck(&cfg, a.term.as_deref())?;
            print!("{}", format_gradcheck(&checks));
            if !checks.iter().all(|c| c.passed()) {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
