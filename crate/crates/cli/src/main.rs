use std::process::ExitCode;

use clap::Parser;
use evotext_cli::commands::{run, Cli};

/// The arguments minus the output directory, so that the recorded
/// invocation does not depend on where a run was written.
fn invocation() -> String {
    let mut parts = vec!["evotext".to_string()];
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--out" {
            args.next();
        } else if !a.starts_with("--out=") {
            parts.push(a);
        }
    }
    parts.join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli, &invocation()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
