//! `flashsim`: run flash-process experiments and the verification suites.
//!
//! Exit status: 0 success, 1 configuration or usage error, 2 numerical
//! failure (a `diagnostic.json` is left in the output directory), 3 a
//! verification check failed.


#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0)` rejects NaN too
mod config;
mod output;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::Config;
use run::{RunError, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "flashsim", version, about = "Flash-ontology collapse simulations and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment a JSON config describes.
    Run {
        config: PathBuf,
        #[arg(short, long, default_value = "out")]
        output: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for trajectory ensembles.
        #[arg(long, env = "FLASHSIM_THREADS", default_value_t = 1)]
        threads: usize,
    },
    /// Run a verification suite and print its checks.
    Verify {
        #[arg(long, value_enum)]
        suite: verify::Suite,
        /// Multiplies every upper-bound tolerance.
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
        #[arg(long, env = "FLASHSIM_THREADS", default_value_t = 1)]
        threads: usize,
    },
    /// List the experiments a config can name.
    ListExperiments,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run { config, output, seed, threads } => run_command(&config, &output, seed, threads),
        Command::Verify { suite, tolerance_scale, threads: _ } => verify_command(suite, tolerance_scale),
        Command::ListExperiments => {
            for (name, models, what) in config::EXPERIMENTS {
                println!("{name:<14} [{models}] {what}");
            }
            ExitCode::SUCCESS
        }
    }
}

fn run_command(path: &PathBuf, out: &PathBuf, seed: Option<u64>, threads: usize) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", path.display());
            return ExitCode::from(1);
        }
    };
    let cfg = match Config::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    let opts = RunOptions { seed: seed.unwrap_or(cfg.seed), threads: threads.max(1) };
    match run::run(&cfg, &opts, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(RunError::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            let diag = json!({ "error": msg, "config": path.display().to_string(), "seed": opts.seed });
            if std::fs::create_dir_all(out).and_then(|_| output::write_json(&out.join("diagnostic.json"), &diag)).is_err() {
                eprintln!("could not write diagnostic.json to {}", out.display());
            }
            ExitCode::from(2)
        }
    }
}

fn verify_command(suite: verify::Suite, scale: f64) -> ExitCode {
    if !(scale.is_finite() && scale > 0.0) {
        eprintln!("invalid value for `--tolerance-scale`: must be positive");
        return ExitCode::from(1);
    }
    match verify::run_suite(suite, scale) {
        Ok(checks) => {
            print!("{}", verify::table(&checks));
            let failed = checks.iter().filter(|c| !c.pass()).count();
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("numerical failure: {e}");
            ExitCode::from(2)
        }
    }
}
