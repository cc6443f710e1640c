//! `mediate` command-line workflow.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mediate_core::Error;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "mediate", version, about = "Causal mediation through a longitudinal mediator with a treatment-dependent confounder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an observational cohort from the config's simulation design.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the joint model and the confounder model by MCMC.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior effect decompositions.
    Effects {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `fit`.
        #[arg(long)]
        draws: PathBuf,
        /// `min`, `max`, `grid`, a value in [0, 1], or a JSON file of per-stratum values.
        #[arg(long)]
        rho: Option<String>,
        /// Output directory; defaults to the draws directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bounds on the direct and indirect effects under relaxed monotonicity.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-stratum monotonicity diagnostics of the confounder posterior.
    CheckMonotonicity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kaplan-Meier restricted-area total effect.
    Km {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failures mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Usage(String),
    /// Outputs were written but the run did not converge.
    NotConverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::NotConverged(_) => 4,
            Failure::Core(e) => match e {
                Error::InfeasibleStratum(_) | Error::MonotonicityInfeasible { .. } | Error::StepMonotonicityInconsistent { .. } | Error::AllDrawsDiscarded => 3,
                Error::NoConvergence { .. } => 4,
                _ => 2,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::NotConverged(_) => "non_convergence",
            Failure::Core(e) => match e {
                Error::InvalidInput(_) => "invalid_input",
                Error::DegenerateRiskSet => "degenerate_risk_set",
                Error::MonotonicityInfeasible { .. } => "monotonicity_infeasible",
                Error::StepMonotonicityInconsistent { .. } => "step_monotonicity_inconsistent",
                Error::UnsupportedDimension(_) => "unsupported_dimension",
                Error::NoConvergence { .. } => "no_convergence",
                Error::InfeasibleStratum(_) => "infeasible_stratum",
                Error::AllDrawsDiscarded => "all_draws_discarded",
                Error::SchemaViolation { .. } => "schema_violation",
                Error::OrphanRecord { .. } => "orphan_record",
                Error::Io(_) => "io",
                Error::Csv(_) => "csv",
                Error::Json(_) => "json",
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::NotConverged(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("MEDIATE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("MEDIATE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, &out),
        Command::Fit { config, out } => commands::fit(&config, &out),
        Command::Effects { config, draws, rho, out } => commands::effects(&config, &draws, rho.as_deref(), out.as_deref()),
        Command::Bounds { config, draws, out } => commands::bounds(&config, &draws, out.as_deref()),
        Command::CheckMonotonicity { config, draws, out } => commands::check_monotonicity(&config, &draws, out.as_deref()),
        Command::Km { config, out } => commands::km(&config, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::Usage(e.to_string().trim().to_string());
            eprintln!("{}", json!({"error": {"code": f.code(), "kind": f.kind(), "message": f.message()}}));
            return ExitCode::from(f.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": {"code": f.code(), "kind": f.kind(), "message": f.message()}}));
            ExitCode::from(f.code())
        }
    }
}
