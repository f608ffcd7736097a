//! Command-line driver: CSV/JSON I/O, run manifests and the subcommands.

pub mod args;
pub mod commands;
pub mod error;
pub mod io;
pub mod manifest;

pub use args::{Cli, Command};
pub use error::{CliError, CliResult};

const THREADS_ENV: &str = "LATENT_BRRR_THREADS";

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => match flag {
            Some(0) => Err(CliError::Usage("--threads must be positive".into())),
            other => Ok(other),
        },
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.threads)? {
        // Fails only if a pool already exists, e.g. when called twice in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Cv(a) => commands::cv(&a),
        Command::Assoc(a) => commands::assoc(&a),
        Command::Verify(a) => commands::verify(&a),
    }
}
