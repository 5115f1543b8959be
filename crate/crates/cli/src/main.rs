//! `tridot`: command-line front end for the three-dot entangler simulator.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, Context, Units};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "tridot", version, about = "Simulate a passive three-dot spin entangler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` lines); repeat for several regimes.
    #[arg(long = "config", value_name = "PATH")]
    configs: Vec<PathBuf>,
    /// RNG seed; drawn from entropy and printed when neither this nor the
    /// config sets one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (directory for `rates`); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "natural")]
    units: Units,
    /// Number of trajectories for ensembles and empirical overlays.
    #[arg(long = "n-traj")]
    n_traj: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Time-averaged |011> population over (delta, g) grids.
    ScanSuppression(Common),
    /// Emission event stream of one trajectory, or ensemble populations.
    Trajectory(Common),
    /// Good-pair rate, post-selection probability and fidelity curves.
    Rates(Common),
    /// Stationary populations and currents.
    Steady(Common),
    /// Run the invariant suite and report pass/fail per check.
    Validate(Common),
}

fn load(common: &Common) -> Result<Vec<RunConfig>, CliError> {
    if common.configs.is_empty() {
        return Ok(vec![RunConfig::default()]);
    }
    common.configs.iter().map(|p| RunConfig::load(p).map_err(CliError::from)).collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, command) = match &cli.command {
        Command::ScanSuppression(c)
        | Command::Trajectory(c)
        | Command::Rates(c)
        | Command::Steady(c)
        | Command::Validate(c) => (c, &cli.command),
    };
    let cfgs = load(common)?;
    let ctx = Context { seed: common.seed, out: common.out.clone(), units: common.units, n_traj: common.n_traj };
    let single = || -> Result<&RunConfig, CliError> {
        match cfgs.as_slice() {
            [one] => Ok(one),
            _ => Err(CliError::Config("this subcommand takes exactly one --config".into())),
        }
    };
    match command {
        Command::ScanSuppression(_) => commands::scan_suppression(single()?, &ctx),
        Command::Trajectory(_) => commands::trajectory(single()?, &ctx),
        Command::Steady(_) => commands::steady(single()?, &ctx),
        Command::Rates(_) => commands::rates(&cfgs, &ctx),
        Command::Validate(_) => commands::validate(&cfgs, &ctx),
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
