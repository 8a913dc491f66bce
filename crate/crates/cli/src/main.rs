use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meshcast::sensing::Strategy;
use meshcast_cli::{commands, RunConfig};

#[derive(Parser)]
#[command(name = "meshcast", version, about = "Graph diffusion forecasting with adaptive sensor placement")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "meshcast.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write the dataset directory.
    GenerateData,
    /// Train the forecaster.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps; resume later to finish.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Train the error predictor used by predictive placement.
    TrainErrorNet {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Ensemble forecasts without observations.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Ensemble forecasts with sensors placed by a strategy.
    Assimilate {
        /// Overrides `sensing.strategy`.
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        error_net: Option<PathBuf>,
    },
    /// Place one sensor set for a held-out state and write sensors.json.
    PlaceSensors {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long, default_value_t = 0)]
        trajectory: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        error_net: Option<PathBuf>,
    },
    /// Numerical checks of the theory; exits non-zero on failure.
    Verify,
    /// Time greedy placement against the sensor count.
    BenchmarkPlacement,
}

fn run(cli: Cli) -> meshcast::error::Result<bool> {
    let mut cfg = RunConfig::load(&cli.config)?;
    commands::configure_threads(&cfg)?;
    match cli.command {
        Command::GenerateData => {
            let dir = commands::generate_data(&cfg)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train { resume, stop_after } => {
            let out = commands::train(&cfg, resume, stop_after)?;
            println!("trained to {:.3} kimg, final loss {:?}", out.state.kimg, out.losses.last());
        }
        Command::TrainErrorNet { checkpoint } => {
            let losses = commands::train_error_net(&cfg, checkpoint.as_deref())?;
            println!("error predictor trained, final loss {:?}", losses.last());
        }
        Command::Forecast { checkpoint } => {
            let r = commands::forecast(&cfg, checkpoint.as_deref())?;
            println!("mean MAE {:.6}", r.mean_mae);
        }
        Command::Assimilate { strategy, checkpoint, error_net } => {
            if let Some(s) = strategy {
                cfg.sensing.strategy = s;
            }
            let stem = format!("assimilate_{}", cfg.sensing.strategy);
            let r = commands::assimilate(&cfg, checkpoint.as_deref(), error_net.as_deref(), &stem)?;
            println!("{}: mean MAE {:.6}", r.strategy, r.mean_mae);
        }
        Command::PlaceSensors { strategy, trajectory, index, checkpoint, error_net } => {
            if let Some(s) = strategy {
                cfg.sensing.strategy = s;
            }
            let out = commands::place(&cfg, checkpoint.as_deref(), error_net.as_deref(), trajectory, index)?;
            println!("{}", out["sensors"]);
        }
        Command::Verify => {
            let r = commands::verify(&cfg)?;
            for c in &r.checks {
                println!("{} {} (margin {:.4})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.margin);
            }
            return Ok(r.passed);
        }
        Command::BenchmarkPlacement => {
            let r = commands::benchmark(&cfg)?;
            for row in &r.rows {
                println!("{} sensors: {:.6} s", row.sensors, row.seconds);
            }
            println!("log-log slope {:.3}", r.loglog_slope);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
