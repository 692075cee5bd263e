//! Command-line pipeline: synthetic generation, probes, manifolds, geometry,
//! steering and plot export over a shared output directory.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
mod io;
pub mod svg;

pub use config::PipelineConfig;
pub use error::{exit_code, invalid, Invalid};

#[derive(Debug, Parser)]
#[command(name = "beliefspace", version, about = "Belief-space analysis pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON or TOML pipeline config.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory shared by every command.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset from the planted-geometry oracle.
    SynthGen(Common),
    /// Fit probes at every layer and select the best one.
    Probe(Common),
    /// Fit behavior and activation manifolds.
    Manifold(Common),
    /// Centroids, distances, clustering and matrix correlation.
    Geometry(Common),
    /// Steering vectors, interventions and entanglement analysis.
    Steer(Common),
    /// Per-story CSV and SVG belief timeseries.
    ExportPlots(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::SynthGen(c)
            | Command::Probe(c)
            | Command::Manifold(c)
            | Command::Geometry(c)
            | Command::Steer(c)
            | Command::ExportPlots(c) => c,
        }
    }
}

pub fn resolve_config(common: &Common) -> error::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(command: &Command) -> error::Result<()> {
    let cfg = resolve_config(command.common())?;
    match command {
        Command::SynthGen(_) => commands::synth_gen(&cfg),
        Command::Probe(_) => commands::probe(&cfg),
        Command::Manifold(_) => commands::manifold(&cfg),
        Command::Geometry(_) => commands::geometry(&cfg),
        Command::Steer(_) => commands::steer(&cfg),
        Command::ExportPlots(_) => commands::export_plots(&cfg),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
