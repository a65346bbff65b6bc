use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sustain_cli::checks::{run_suite, Suite};
use sustain_cli::config::{parse_override, ExperimentConfig};
use sustain_cli::output::read_series;
use sustain_cli::{run_grid, Result};
use sustain_core::metrics::{fit_rate_exponent, running_min, Metric};

#[derive(Parser)]
#[command(
    name = "sustain",
    version,
    about = "Stochastic bilevel optimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded grid described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Config overrides of the form `--key=value`.
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "--KEY=VALUE"
        )]
        overrides: Vec<String>,
    },
    /// Fit a power-law exponent to one column of a trajectory CSV.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        metric: String,
        #[arg(long, default_value_t = 1.0)]
        tmin: f64,
        #[arg(long, default_value_t = f64::INFINITY)]
        tmax: f64,
        /// Fit the running minimum of the column instead of the raw values.
        #[arg(long)]
        running_min: bool,
    },
    /// Run self-check suites; exits nonzero if any check fails.
    Check {
        #[arg(long = "suite", value_enum, required = true)]
        suites: Vec<Suite>,
    },
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, overrides } => {
            let overrides = overrides
                .iter()
                .map(|a| parse_override(a))
                .collect::<Result<Vec<_>>>()?;
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let report = run_grid(&cfg)?;
            let failed = report
                .cells
                .iter()
                .filter(|c| c.completed().is_none())
                .count();
            println!(
                "{} cells ({} incomplete) written to {}",
                report.cells.len(),
                failed,
                report.output_dir.display()
            );
            Ok(true)
        }
        Command::Fit {
            input,
            metric,
            tmin,
            tmax,
            running_min: use_min,
        } => {
            let metric = Metric::parse(&metric)?;
            let mut series = read_series(&input, metric.name())?;
            if use_min {
                let values: Vec<f64> = series.iter().map(|p| p.1).collect();
                for (p, m) in series.iter_mut().zip(running_min(&values)) {
                    p.1 = m;
                }
            }
            let fit = fit_rate_exponent(&series, tmin, tmax)?;
            println!(
                "exponent={:?} intercept={:?} r_squared={:?} t_min={:?} t_max={:?}",
                fit.exponent, fit.intercept, fit.r_squared, fit.window.0, fit.window.1
            );
            Ok(true)
        }
        Command::Check { suites } => {
            let mut all = true;
            for suite in suites {
                for r in run_suite(suite)? {
                    all &= r.passed;
                    println!("{r}");
                }
            }
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
