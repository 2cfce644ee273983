use std::path::PathBuf;
use std::process::ExitCode;

use budgetguard_cli::commands::{self, Construction, VerifySizes};
use budgetguard_cli::config::SEED_ENV;
use budgetguard_cli::{CliError, ScenarioConfig};
use clap::{Parser, Subcommand, ValueEnum};

/// Privacy-budget accounting simulator and log replayer.
#[derive(Parser)]
#[command(name = "budgetguard", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    /// Data ingested adaptively after earlier query results.
    AdaptiveData,
    /// Helper queriers draining a shared limit.
    SharedLimit,
}

#[derive(Subcommand)]
enum Command {
    /// Run a synthetic scenario for every configured seed.
    Simulate {
        config: PathBuf,
        /// Output directory (defaults to output.dir in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Feed a recorded event CSV through the engine.
    Replay {
        events: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized atomicity, audit and resilience checks for a configuration.
    VerifyBounds {
        config: PathBuf,
        #[arg(long, default_value_t = 2000)]
        traces: u64,
        #[arg(long, default_value_t = 20)]
        runs: u64,
    },
    /// Estimate the privacy loss of a negative construction.
    DemoCounterexample {
        which: Which,
        /// Silent-drop variant of the shared-limit construction.
        #[arg(long)]
        idp: bool,
        #[arg(long, default_value_t = 1.0)]
        eps: f64,
        /// Number of helper queriers.
        #[arg(long)]
        helpers: Option<u32>,
        #[arg(long, default_value_t = 200_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate workload bounds from an event CSV and print derived quotas.
    DeriveQuotas {
        events: PathBuf,
        #[arg(long)]
        percentile: f64,
        #[arg(long)]
        eps_querier: f64,
        #[arg(long, default_value_t = 2)]
        kappa: u32,
        #[arg(long, default_value_t = 0.0)]
        intermediary_fraction: f64,
        #[arg(long, default_value_t = budgetguard::event::DEFAULT_EPOCH_LENGTH)]
        epoch_length: u64,
    },
    /// Replay an event CSV and write the resulting filter snapshot.
    Snapshot {
        events: PathBuf,
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resume from a snapshot and replay further events.
    Restore {
        snapshot: PathBuf,
        events: PathBuf,
        config: PathBuf,
        /// Events already reflected in the snapshot, kept for attribution.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let env_seed = env_seed.as_deref();
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            commands::simulate(&cfg, &commands::output_dir(out, &cfg), env_seed)
        }
        Command::Replay { events, config, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            commands::replay(&events, &cfg, &commands::output_dir(out, &cfg), env_seed)
        }
        Command::VerifyBounds { config, traces, runs } => {
            let cfg = ScenarioConfig::load(&config)?;
            commands::verify_bounds(&cfg, VerifySizes { traces, runs }, env_seed)
        }
        Command::DemoCounterexample { which, idp, eps, helpers, trials, seed } => {
            let which = match which {
                Which::AdaptiveData => Construction::AdaptiveData,
                Which::SharedLimit => Construction::SharedLimit,
            };
            if idp && which == Construction::AdaptiveData {
                return Err(CliError::Config("--idp applies to shared-limit only".into()));
            }
            commands::demo_counterexample(which, idp, eps, helpers, trials, seed)
        }
        Command::DeriveQuotas { events, percentile, eps_querier, kappa, intermediary_fraction, epoch_length } => {
            commands::derive_quotas(&events, percentile, eps_querier, kappa, intermediary_fraction, epoch_length)
        }
        Command::Snapshot { events, config, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            commands::snapshot(&events, &cfg, &out, env_seed)
        }
        Command::Restore { snapshot, events, config, history, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            commands::restore(&snapshot, &events, history.as_deref(), &cfg, &commands::output_dir(out, &cfg), env_seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
