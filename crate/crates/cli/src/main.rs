use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use drcorl::config::ExperimentConfig;
use drcorl::pipeline::{self, EvalTarget};
use drcorl::safe_adapt::ExtractionMode;

#[derive(Parser)]
#[command(
    name = "drcorl",
    version,
    about = "Diffusion-regularised constrained offline RL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and DRCORL_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Drcorl,
    Bc,
}

impl From<Mode> for ExtractionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Drcorl => ExtractionMode::Drcorl,
            Mode::Bc => ExtractionMode::BehaviorCloning,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behaviour policy and write dataset.csv.
    GenData(Common),
    /// Fit the diffusion behaviour model.
    PretrainDiffusion(Common),
    /// Fit reward and cost critics to the behaviour policy.
    PretrainCritics(Common),
    /// Extract a policy; writes the policy, metric and region CSVs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides train.mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Evaluate a policy and write per-episode results.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate the configured behaviour policy.
        #[arg(long, conflicts_with_all = ["policy", "mode"])]
        behavior: bool,
        /// Policy checkpoint to evaluate.
        #[arg(long, conflicts_with = "mode")]
        policy: Option<PathBuf>,
        /// Trained policy of this mode from the output directory.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run the tabular NPG convergence check.
    Theorem(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let path = pipeline::cmd_gen_data(&load(&c)?)?;
            println!("wrote {}", path.display());
        }
        Command::PretrainDiffusion(c) => {
            let path = pipeline::cmd_pretrain_diffusion(&load(&c)?)?;
            println!("wrote {}", path.display());
        }
        Command::PretrainCritics(c) => {
            let path = pipeline::cmd_pretrain_critics(&load(&c)?)?;
            println!("wrote {}", path.display());
        }
        Command::Train { common, mode } => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode {
                cfg.train.mode = m.into();
            }
            let s = pipeline::cmd_train(&cfg)?;
            let [safe, unsafe_, align, conflict] = s.region_counts;
            println!(
                "wrote {} and {}\nfinal normalized return {:.4}, normalized cost {:.4}\nregions safe {safe} unsafe {unsafe_} align {align} conflict {conflict}",
                s.policy.display(),
                s.metrics.display(),
                s.normalized_return,
                s.normalized_cost
            );
        }
        Command::Eval {
            common,
            behavior,
            policy,
            mode,
        } => {
            let cfg = load(&common)?;
            let target = if behavior {
                EvalTarget::Behavior
            } else if let Some(p) = policy {
                EvalTarget::Checkpoint(p)
            } else {
                EvalTarget::Trained(mode.map(Into::into).unwrap_or(cfg.train.mode))
            };
            println!("{}", pipeline::cmd_eval(&cfg, &target)?);
        }
        Command::Theorem(c) => {
            print!("{}", pipeline::cmd_theorem(&load(&c)?)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
