mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Model(#[from] repulse_bbm::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use repulse_bbm::Error as E;
        match self {
            CliError::Validation(_) => 1,
            CliError::Usage(_) | CliError::Model(E::Domain(_)) => 2,
            CliError::Model(_) | CliError::Io(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "repulse-bbm",
    version,
    about = "Branching Brownian motion with self-repulsion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    cfg: RunConfig,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form quantities.
    #[command(subcommand)]
    Analytic(AnalyticCmd),
    /// Draw finite-horizon trees as JSON lines.
    SampleTree,
    /// Draw trees of the small-penalty limit as JSON lines.
    SampleLimit,
    /// Weighted spatial BBM; one CSV row per realisation.
    SimulateFull,
    /// Time-dependent F-KPP equation.
    #[command(subcommand)]
    Fkpp(FkppCmd),
    /// Closed forms and Monte Carlo for the model with deaths.
    Death,
    /// Run the acceptance suite.
    Validate {
        /// Reduced Monte Carlo sample sizes.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Debug, Subcommand)]
enum AnalyticCmd {
    /// Evaluate one formula, selected with --formula.
    Eval,
}

#[derive(Debug, Subcommand)]
enum FkppCmd {
    /// Solve from Heaviside data and write snapshots.
    Solve,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Analytic(AnalyticCmd::Eval) => "analytic eval",
            Command::SampleTree => "sample-tree",
            Command::SampleLimit => "sample-limit",
            Command::SimulateFull => "simulate-full",
            Command::Fkpp(FkppCmd::Solve) => "fkpp solve",
            Command::Death => "death",
            Command::Validate { .. } => "validate",
        }
    }
}

fn init_pool(cfg: &RunConfig) -> Result<(), CliError> {
    let from_env =
        match std::env::var("REPULSE_BBM_THREADS") {
            Ok(s) => Some(s.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Usage(format!("REPULSE_BBM_THREADS must be a positive integer, got '{s}'"))
            })?),
            Err(_) => None,
        };
    if let Some(n) = from_env.or(cfg.workers) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} workers: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.cfg, cli.command.name())?;
    init_pool(&cfg)?;
    match cli.command {
        Command::Analytic(AnalyticCmd::Eval) => commands::analytic_eval(&cfg),
        Command::SampleTree => commands::sample_tree(&cfg),
        Command::SampleLimit => commands::sample_limit(&cfg),
        Command::SimulateFull => commands::simulate_full(&cfg),
        Command::Fkpp(FkppCmd::Solve) => commands::fkpp_solve(&cfg),
        Command::Death => commands::death(&cfg),
        Command::Validate { quick } => commands::validate(&cfg, quick),
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
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
