mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use ctune_core::packet::{write_stream, Packet};

use args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            let p = Packet::new()
                .with("STATUS", "ERROR")
                .with("MESSAGE", message);
            eprint!("{}", write_stream(&[p]));
            ExitCode::FAILURE
        }
    }
}
