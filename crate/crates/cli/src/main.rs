//! `kamtori`: compute, verify and certify invariant tori from a JSON problem file.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 not converged or a
//! failed check, 3 not certified. Log verbosity follows `RUST_LOG`.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{RunFailed, VerifyOptions};

#[derive(Parser)]
#[command(name = "kamtori", version, about = "Quasi-periodic invariant tori of Poisson systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the quasi-Newton iteration; writes report.json, torus.json and samples.csv.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a coefficient file by integrating the flow; writes verify.json.
    Verify {
        #[arg(long)]
        torus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Integration time `T`.
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        /// Number of random phases.
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Threshold on the invariance error.
        #[arg(long, default_value_t = 1e-10)]
        eps_tol: f64,
        /// Threshold on the conjugacy residual.
        #[arg(long, default_value_t = 1e-8)]
        conjugacy_tol: f64,
        /// Output directory; defaults to the directory of the torus file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the smallness certificate at a coefficient file; writes certificate.json.
    Certify {
        #[arg(long)]
        torus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the directory of the torus file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One solve per value of a parameter; writes sweep.csv and a run directory per value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// A system parameter, or one of modes, rho_0, delta_0, gamma, sigma, target, max_iter.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_out(torus: &Path, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| torus.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Solve { config, out } => commands::solve(&config, &out),
        Command::Verify { torus, config, horizon, samples, seed, eps_tol, conjugacy_tol, out } => {
            let out = default_out(&torus, out);
            let opts = VerifyOptions { horizon, samples, seed, eps_tol, conjugacy_tol };
            commands::verify(&torus, &config, &out, opts)
        }
        Command::Certify { torus, config, out } => {
            let out = default_out(&torus, out);
            commands::certify(&torus, &config, &out)
        }
        Command::Sweep { config, param, values, out } => commands::sweep(&config, &param, &values, &out),
    };
    match result {
        Ok(status) => ExitCode::from(status.code()),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if err.downcast_ref::<RunFailed>().is_some() { 2 } else { 1 })
        }
    }
}
