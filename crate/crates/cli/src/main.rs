//! `rough-filter`: runs the switching-chain experiments and the numerical
//! verification suites.

mod commands;
mod error;
mod gnuplot;
mod manifest;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rough_filter::config::ExperimentConfig;
use rough_filter::value::Mode;
use rough_filter::verify::Suite;

use crate::commands::{replicates, run_all};
use crate::error::{report, CliError};

#[derive(Debug, Parser)]
#[command(name = "rough-filter", version, about = "Robust filtering of a switching chain from a rough observation path")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate chain, observation and its rough lift.
    Simulate(RunArgs),
    /// Run the Wonham filter with the true parameter schedule.
    Filter {
        #[command(flatten)]
        run: RunArgs,
        /// Read observation.csv / rough.csv from this directory instead of simulating.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Propagate the robust value function and write the estimates.
    RobustFilter {
        #[command(flatten)]
        run: RunArgs,
        /// Read observation.csv / rough.csv from this directory instead of simulating.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run a numerical verification suite.
    Verify {
        #[arg(value_parser = parse_suite, default_value = "all")]
        suite: Suite,
        /// Also write verify_report.txt and verify_report.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the oscillating sharpness fixture and its integral.
    Fixture {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 2.5)]
        p: f64,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value = "out/fixture")]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config(RunArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Ex61,
    Ex62,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Lq,
    Grid,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "experiment")]
    config: Option<PathBuf>,
    /// Built-in experiment preset.
    #[arg(long, value_enum, default_value = "ex61")]
    experiment: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of seeds to run, starting at the configured one.
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    /// Use the four-regime schedule over the long horizon.
    #[arg(long)]
    full_horizon: bool,
    /// Also write a gnuplot script next to the outputs.
    #[arg(long)]
    emit_gnuplot: bool,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: rough_filter::Error| e.to_string())
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => match self.experiment {
                Preset::Ex61 => ExperimentConfig::ex61(),
                Preset::Ex62 => ExperimentConfig::ex62(),
            },
        };
        if self.full_horizon {
            cfg = cfg.full_horizon();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = self.mode {
            cfg.mode = match mode {
                ModeArg::Lq => Mode::Lq,
                ModeArg::Grid => Mode::Grid,
            };
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if self.replicates == 0 {
            return Err(CliError::Config("--replicates must be at least 1".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let reps = replicates(&args.config()?, args.replicates, None);
            run_all("simulate", &reps, args.emit_gnuplot, commands::simulate)
        }
        Command::Filter { run, input } => {
            let reps = replicates(&run.config()?, run.replicates, input.as_deref());
            run_all("filter", &reps, run.emit_gnuplot, commands::filter)
        }
        Command::RobustFilter { run, input } => {
            let reps = replicates(&run.config()?, run.replicates, input.as_deref());
            run_all("robust-filter", &reps, run.emit_gnuplot, commands::robust_filter)
        }
        Command::Verify { suite, out } => commands::verify(suite, out.as_deref()),
        Command::Fixture { n, p, eps, out } => commands::fixture(n, p, eps, &out),
        Command::Config(args) => {
            print!("{}", args.config()?.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    report(run(cli))
}
