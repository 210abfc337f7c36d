//! The `eotmix` command line: `sample`, `fit`, `eval` and `verify`.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage error,
//! 3 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::bcd::{fit, FitSettings};
use crate::eot::{semi_relaxed_solve, sinkhorn, SinkhornSettings};
use crate::error::Error;
use crate::io::{
    read_dataset, read_model, write_dataset, write_fit_report, write_model,
    write_verification_report,
};
use crate::mixture::{cost_matrix, nll, sample_gmm};
use crate::types::ProbabilityVector;
use crate::verify::{run_all, IDENTITY_TOL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "eotmix",
    version,
    about = "Gaussian mixtures as entropic optimal transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a labeled dataset from a model file.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a shared-covariance mixture by block coordinate descent.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        max_sweeps: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Print the likelihood and transport values of a model on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the randomized identity checks and write a report.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::TooFewPoints { .. } | Error::InvalidSettings(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Check) => EXIT_CHECK_FAILED,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Sample {
            model,
            n,
            seed,
            out: path,
        } => {
            if n == 0 {
                return Err(Failure::Usage("--n must be at least 1".into()));
            }
            let params = read_model(&model)?;
            let data = sample_gmm(&params, n, seed)?;
            write_dataset(&data, &path)?;
            writeln!(
                out,
                "sampled n={} d={} K={}",
                n,
                params.dimension(),
                params.n_components()
            )?;
        }
        Command::Fit {
            data,
            k,
            seed,
            max_sweeps,
            tol,
            out_model,
            out_report,
        } => {
            if k == 0 {
                return Err(Failure::Usage("--k must be at least 1".into()));
            }
            if max_sweeps == 0 {
                return Err(Failure::Usage("--max-sweeps must be at least 1".into()));
            }
            if !(tol >= 0.0 && tol.is_finite()) {
                return Err(Failure::Usage(format!(
                    "--tol must be a nonnegative number, got {tol}"
                )));
            }
            let data = read_dataset(&data)?;
            if k > data.len() {
                return Err(Failure::Usage(format!(
                    "--k {k} exceeds the number of points {}",
                    data.len()
                )));
            }
            let settings = FitSettings {
                max_sweeps,
                nll_tolerance: tol,
                seed,
                ..Default::default()
            };
            let report = fit(&data, k, &settings, None)?;
            write_model(&report.final_params, &out_model)?;
            write_fit_report(&report, &out_report)?;
            let final_nll = report
                .nll_trajectory
                .last()
                .copied()
                .unwrap_or(report.initial_nll);
            writeln!(
                out,
                "sweeps={} converged={} termination={} nll={:.11e}",
                report.sweeps_used,
                report.converged,
                report.termination_reason.as_str(),
                final_nll
            )?;
        }
        Command::Eval { data, model } => {
            let data = read_dataset(&data)?;
            let params = read_model(&model)?;
            let n = data.len();
            let c = cost_matrix(&params, &data)?;
            let scaled_nll = nll(&params, &data)? / n as f64;
            let semi = semi_relaxed_solve(params.weights(), &c)?.value();
            let full = sinkhorn(
                &ProbabilityVector::uniform(n),
                params.weights(),
                &c,
                &SinkhornSettings::default(),
            )?;
            writeln!(out, "nll_per_point = {scaled_nll:.11e}")?;
            writeln!(out, "semi_relaxed_value = {semi:.11e}")?;
            writeln!(out, "sinkhorn_value = {:.11e}", full.value())?;
            writeln!(out, "bound_gap = {:.11e}", full.value() - scaled_nll)?;
            if !full.converged() {
                writeln!(
                    out,
                    "warning: sinkhorn stopped at marginal residual {:.3e}",
                    full.marginal_residual()
                )?;
            }
            let deviation = (scaled_nll - semi).abs();
            if !(deviation <= IDENTITY_TOL) {
                return Err(Failure::Runtime(Error::InvariantViolation(format!(
                    "likelihood/transport identity off by {deviation:e}"
                ))));
            }
        }
        Command::Verify {
            seed,
            trials,
            out: path,
        } => {
            if trials == 0 {
                return Err(Failure::Usage("--trials must be at least 1".into()));
            }
            let report = run_all(seed, trials)?;
            write_verification_report(&report, &path)?;
            for c in &report.checks {
                writeln!(
                    out,
                    "{} {} instances={} max_residual={:.3e} tolerance={:.0e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.instances_run,
                    c.max_residual,
                    c.tolerance
                )?;
            }
            if !report.all_passed() {
                return Err(Failure::Check);
            }
        }
    }
    Ok(())
}
