use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use consensus_cli::{
    apply_overrides, cmd_run, cmd_sweep, cmd_synth, report::cmd_report, ExperimentConfig,
    Overrides,
};
use consensus_core::datagen::SyntheticConfig;

#[derive(Parser)]
#[command(
    name = "consensus",
    about = "Online consensus prediction experiments: budgeted expert querying with a free classifier"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay one run per seed and write JSONL episode logs.
    Run(CommonArgs),
    /// Run the configured hyperparameter grid across seeds; emit a points CSV.
    Sweep(CommonArgs),
    /// Generate a synthetic dataset file.
    Synth {
        /// JSON file holding a synthetic stream config.
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate sweep points and logs into bucket/shift/correlation tables.
    Report {
        /// Sweep points CSV (from `sweep`).
        #[arg(long)]
        points: PathBuf,
        /// Directory of JSONL episode logs.
        #[arg(long)]
        logs: PathBuf,
        /// Output directory for the tables.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Policy override: finexp | infexp | fixed-fin | fixed-inf | random |
    /// entropy | model-picker.
    #[arg(long)]
    policy: Option<String>,
    /// Threshold override.
    #[arg(long)]
    rho: Option<f64>,
    /// Random-policy query rate override.
    #[arg(long)]
    beta: Option<f64>,
    /// Entropy / model-picker scale override.
    #[arg(long)]
    scale: Option<f64>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Expert pool size (subsamples the dataset's pool).
    #[arg(long = "experts")]
    experts: Option<u32>,
    /// Monte-Carlo samples per query decision.
    #[arg(long = "mc")]
    mc: Option<usize>,
    /// Sliding-window capacity for the MAP refits.
    #[arg(long)]
    window: Option<usize>,
    /// Run mode: standard | two-phase | shift.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        let ov = Overrides {
            policy: self.policy.clone(),
            rho: self.rho,
            beta: self.beta,
            scale: self.scale,
            seed: self.seed,
            experts: self.experts,
            mc: self.mc,
            window: self.window,
            mode: self.mode.clone(),
            out: self.out.clone(),
        };
        apply_overrides(&mut cfg, &ov)?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run(args) => {
            cmd_run(&args.load()?)?;
        }
        Cmd::Sweep(args) => {
            cmd_sweep(&args.load()?)?;
        }
        Cmd::Synth { config, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let synth: SyntheticConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", config.display()))?;
            cmd_synth(&synth, &out)?;
        }
        Cmd::Report { points, logs, out } => {
            cmd_report(&points, &logs, &out)?;
        }
    }
    Ok(())
}
