use std::process::ExitCode;

use clap::Parser;
use popdmp::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse(), std::io::stdout().lock()) {
        Ok(code) => ExitCode::from(code.clamp(0, 255) as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
