use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use selfheal::engine::AlgorithmParams;
use selfheal::harness::{
    certify_row, run_scenario, sweep_rates, verify_invariants, write_outputs, write_rate_csv, RunStatus, Scenario,
    DEFAULT_TOL,
};

#[derive(Parser)]
#[command(name = "selfheal", version)]
#[command(about = "Self-healing distributed gradient descent: simulation and rate certification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ParamArgs {
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
}

impl ParamArgs {
    /// `alpha` is a placeholder; callers either override or optimize it.
    fn params(&self, alpha: f64) -> Result<AlgorithmParams> {
        Ok(AlgorithmParams::new(alpha, self.beta, self.gamma, self.delta)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write trace.ndjson, summary.csv and report.json
    Simulate {
        scenario: PathBuf,
        /// Override the scenario's master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the scenario's `output.dir`)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include w1, w2 and x in every trace record
        #[arg(long)]
        full_states: bool,
    },
    /// Certify a worst-case rate for one (kappa, sigma) pair, printed as CSV
    Certify {
        #[arg(long)]
        kappa: f64,
        #[arg(long)]
        sigma: f64,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, conflicts_with = "optimize_alpha")]
        alpha: Option<f64>,
        #[arg(long)]
        optimize_alpha: bool,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Optimal step size and certified rate over a list of sigmas
    Sweep {
        #[arg(long)]
        kappa: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        sigmas: Vec<f64>,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks
    Check,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { scenario, seed, out, full_states } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            sc.output.full_states |= full_states;
            let report = run_scenario(&sc)?;
            if let Some(dir) = out.or_else(|| sc.output.dir.clone()) {
                write_outputs(&report, &dir)?;
                eprintln!("wrote {}", dir.display());
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let tail = report.tail.map_or("n/a".to_string(), |t| format!("{:.6} (R² {:.4})", t.rate, t.r_squared));
            println!(
                "{}: {} after {} steps, final max_error {:.3e}, tail rate {}",
                report.name,
                match report.status {
                    RunStatus::Converged => "converged".to_string(),
                    RunStatus::MaxSteps => "step limit".to_string(),
                    RunStatus::Diverged { k } => format!("diverged at step {k}"),
                },
                report.iterations,
                report.final_max_error,
                tail
            );
            Ok(!matches!(report.status, RunStatus::Diverged { .. }))
        }
        Command::Certify { kappa, sigma, params, alpha, optimize_alpha, tol } => {
            if alpha.is_none() && !optimize_alpha {
                bail!("pass --alpha X or --optimize-alpha");
            }
            let row = certify_row(kappa, sigma, &params.params(alpha.unwrap_or(1.0 / kappa))?, alpha, tol);
            if let Some(e) = &row.error {
                eprintln!("{e}");
            }
            write_rate_csv(std::slice::from_ref(&row), io::stdout().lock())?;
            Ok(row.feasible)
        }
        Command::Sweep { kappa, sigmas, params, tol, out } => {
            let rows = sweep_rates(kappa, &sigmas, &params.params(1.0 / kappa)?, tol);
            for r in rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("sigma {}: {}", r.sigma, r.error.as_deref().unwrap_or_default());
            }
            match out {
                Some(path) => {
                    let f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    write_rate_csv(&rows, f)?;
                }
                None => write_rate_csv(&rows, io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::Check => {
            let report = verify_invariants();
            let mut out = io::stdout().lock();
            for c in &report.checks {
                writeln!(out, "[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail)?;
            }
            Ok(report.all_passed())
        }
    }
}
