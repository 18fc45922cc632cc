use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(scaleladder_cli::run(scaleladder_cli::Cli::parse()))
}
