//! Command line front end: `train`, `influence`, `filter`, `unlearn`,
//! `curve` and `report`, all driven by one [`ExperimentConfig`].

mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Layout;
pub use config::{derive_seed, ExperimentConfig};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(
    name = "lowimpact",
    version,
    about = "Influence scoring and influence-filtered unlearning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `model.l2_lambda=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the model and record gradient traces and checkpoints.
    Train(Common),
    /// Score training points.
    Influence {
        #[command(flatten)]
        common: Common,
        /// hessian, less, lowest_gradients, exact_loo or all.
        #[arg(long, default_value = "all")]
        method: String,
        /// test or self; defaults to `influence.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Select the low-influence sets over the x-grid, with baselines.
    Filter(Common),
    /// Run every unlearning algorithm over the x-grid and seeds.
    Unlearn(Common),
    /// Removal curves and the low-gradient count curve.
    Curve(Common),
    /// Summarise the unlearning reports.
    Report(Common),
}

impl Common {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Influence {
            common,
            method,
            mode,
        } => commands::influence(&common.resolve()?, method, mode.as_deref()),
        Command::Filter(c) => commands::filter(&c.resolve()?),
        Command::Unlearn(c) => commands::unlearn(&c.resolve()?),
        Command::Curve(c) => commands::curve(&c.resolve()?),
        Command::Report(c) => commands::report(&c.resolve()?),
    }
}
