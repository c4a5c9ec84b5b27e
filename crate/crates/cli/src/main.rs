//! Pipeline entry point: ingestion -> co-purchase graph -> demand fit ->
//! MAPPO training -> CRN-paired evaluation -> report, driven by one TOML
//! config with per-stage artifacts and content-hash manifests.

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use pricing_lab_core::marl::Architecture;

use config::{RunConfig, WORK_DIR_ENV};

#[derive(Parser)]
#[command(name = "pricing-lab", version, about = "Portfolio pricing lab pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// run configuration TOML
    #[arg(long, default_value = "config.toml")]
    config: PathBuf,
    /// override the work directory (also settable via PRICING_LAB_WORK_DIR)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// override train.seeds, comma separated
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// restrict to one architecture
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
    /// override the stability-weight grid, comma separated
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    Architecture::from_str(s)
}

#[derive(Subcommand)]
enum Command {
    /// Regenerate the bundled synthetic transaction fixture
    Synth {
        #[command(flatten)]
        common: Common,
        /// generator seed
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Parse, clean and trim raw transactions into catalog and panel
    Ingest(Common),
    /// Build the co-purchase graph from cleaned transactions
    Graph(Common),
    /// Fit the demand oracle and observation normalizer
    Fit(Common),
    /// Train policies over the seed, architecture and lambda grids
    Train(Common),
    /// Evaluate trained policies under common random numbers
    Eval(Common),
    /// Pair the two architectures into a report with figure data
    Report(Common),
}

impl Common {
    /// Load the config and apply flag and environment overrides.
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seeds) = &self.seed_list {
            config.train.seeds = seeds.clone();
        }
        if let Some(arch) = self.arch {
            config.train.archs = vec![arch.to_string()];
        }
        if let Some(grid) = &self.lambda_grid {
            config.eval.lambda_grid = grid.clone();
        }
        config.validate()?;
        let work_dir = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(WORK_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| config.paths.work_dir.clone());
        Ok((config, work_dir))
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth { common, seed } => {
            let (config, _) = common.resolve()?;
            stages::cmd_synth(&config, *seed)
        }
        Command::Ingest(common) => {
            let (config, work_dir) = common.resolve()?;
            stages::cmd_ingest(&config, &work_dir)
        }
        Command::Graph(common) => {
            let (config, work_dir) = common.resolve()?;
            stages::cmd_graph(&config, &work_dir)
        }
        Command::Fit(common) => {
            let (config, work_dir) = common.resolve()?;
            stages::cmd_fit(&config, &work_dir)
        }
        Command::Train(common) => {
            let (config, work_dir) = common.resolve()?;
            stages::cmd_train(&config, &work_dir)
        }
        Command::Eval(common) => {
            let (config, work_dir) = common.resolve()?;
            stages::cmd_eval(&config, &work_dir)
        }
        Command::Report(common) => {
            let (config, work_dir) = common.resolve()?;
            stages::cmd_report(&config, &work_dir)
        }
    }
}
