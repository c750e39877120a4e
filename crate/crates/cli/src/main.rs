mod commands;
mod config;
mod report;

use std::process::ExitCode;

use clap::Parser;

use rowtier::Error;

/// Exit status for the first library error found in the chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::Io { .. } => 3,
                Error::Format { .. } | Error::Parse { .. } => 4,
                Error::Validation(_)
                | Error::Lookup(_)
                | Error::Shape(_)
                | Error::EmptyDataset
                | Error::UndefinedAuc => 5,
                Error::Refused(_) => 6,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = commands::Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
