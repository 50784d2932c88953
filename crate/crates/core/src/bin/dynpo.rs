use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dynpo::config::RunConfig;
use dynpo::harness::{self, ExperimentGrid};
use dynpo::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dynpo",
    version,
    about = "Multi-negative preference optimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set k=7` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset: `synthetic` or a CSV path
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    beta0: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sft_epochs: Option<usize>,
    #[arg(long)]
    po_epochs: Option<usize>,
    /// Sample training negatives once instead of every epoch
    #[arg(long)]
    fixed_negatives: bool,
    #[arg(long, short = 'o')]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 11] = [
            ("data", self.data.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("objective", self.objective.clone()),
            ("variant", self.variant.clone()),
            ("beta0", self.beta0.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("sft_epochs", self.sft_epochs.map(|v| v.to_string())),
            ("po_epochs", self.po_epochs.map(|v| v.to_string())),
            ("output_dir", self.output_dir.as_ref().map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if self.fixed_negatives {
            cfg.fixed_negatives = true;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log and manifest
    Generate(ConfigArgs),
    /// Run SFT then preference optimization, writing a run directory
    Train(ConfigArgs),
    /// Run a grid of configurations and aggregate into sweep.csv
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// k | ablation | topk | alpha | gamma | objectives
        #[arg(long, default_value = "k")]
        grid: String,
        /// Comma-separated axis values overriding the grid default
        #[arg(long)]
        values: Option<String>,
    },
    /// Compare per-step wall time of naive and DynamicPO training
    Timing {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Evaluate a checkpoint against a reference checkpoint
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.resolve()?;
            let log = harness::cmd_generate(&cfg, &cfg.output_dir)?;
            println!(
                "wrote {} rows ({} users, {} items) to {}",
                log.len(),
                log.user_count(),
                log.vocab_size(),
                cfg.output_dir.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = harness::cmd_train(&cfg)?;
            print!("{}", out.summary.to_csv());
        }
        Command::Sweep { cfg, grid, values } => {
            let cfg = cfg.resolve()?;
            let grid = ExperimentGrid::build(&cfg, &grid, values.as_deref())?;
            print!("{}", harness::cmd_sweep(&grid, &cfg.output_dir)?);
        }
        Command::Timing { cfg, repeats } => {
            let cfg = cfg.resolve()?;
            print!("{}", harness::cmd_timing(&cfg, repeats)?.to_csv());
        }
        Command::Eval {
            cfg,
            checkpoint,
            reference,
        } => {
            let cfg = cfg.resolve()?;
            print!("{}", harness::cmd_eval(&cfg, &checkpoint, &reference)?.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('"', "'").replace('\n', " ");
            eprintln!("error kind={} message=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
