//! Argument parsing and command dispatch.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use aida_core::dfc::ControllerMode;

use crate::ablate::{cmd_ablate, table_markdown};
use crate::config::{Overrides, RunConfig};
use crate::data::gen_data;
use crate::error::Result;
use crate::layout::Layout;
use crate::report::cmd_report;
use crate::run::{cmd_adapt, cmd_eval, cmd_train, format_report, StageSelect};

#[derive(Debug, Parser)]
#[command(name = "aida", version, about = "Multi-source domain generalization experiments on synthetic re-identification data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory for inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Stages run by `train`.
    #[arg(long, global = true, value_enum, default_value_t = StageArg::All)]
    pub stage: StageArg,
    /// Controller update rule; overrides the config.
    #[arg(long, global = true, value_enum)]
    pub controller_mode: Option<ModeArg>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source and target datasets with a checksummed manifest.
    GenData,
    /// Supervised pre-training and/or mixed-domain training.
    Train,
    /// Source-free refinement on the target dataset only.
    Adapt,
    /// Retrieval and clustering metrics on the target dataset.
    Eval,
    /// Settings A-D over the configured seeds.
    Ablate,
    /// Charts and a markdown summary from the run directory.
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Sup,
    Aida,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Literal,
    #[value(name = "per_domain")]
    PerDomain,
}

impl From<StageArg> for StageSelect {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Sup => StageSelect::Sup,
            StageArg::Aida => StageSelect::Aida,
            StageArg::All => StageSelect::All,
        }
    }
}

impl From<ModeArg> for ControllerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Literal => ControllerMode::Literal,
            ModeArg::PerDomain => ControllerMode::PerDomain,
        }
    }
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides { seed: self.seed, controller_mode: self.controller_mode.map(Into::into) });
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command. Returns the text printed on success.
pub fn run(cli: &Cli) -> Result<String> {
    let layout = Layout::new(&cli.out);
    if let Command::Report = cli.command {
        let r = cmd_report(&layout)?;
        return Ok(format!("report: {} rows, {} files in {}\n", r.rows.len(), r.files.len(), layout.report_dir().display()));
    }
    let cfg = cli.run_config()?;
    Ok(match cli.command {
        Command::GenData => {
            let m = gen_data(&cfg, &layout)?;
            format!("gen-data: {} files, {} samples\n", m.files.len(), m.total_samples)
        }
        Command::Train => {
            let s = cmd_train(&cfg, &layout, cli.stage.into())?;
            format!("train: {} steps\n", s.metrics.len())
        }
        Command::Adapt => {
            let a = cmd_adapt(&cfg, &layout)?;
            format!("adapt: target mAP before {:.4}, after {:.4}\n", a.before.map, a.after.map)
        }
        Command::Eval => format_report(&cmd_eval(&cfg, &layout)?),
        Command::Ablate => table_markdown(&cmd_ablate(&cfg, &layout)?),
        Command::Report => unreachable!("handled above"),
    })
}
