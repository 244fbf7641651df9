//! Command-line driver and HTTP control API for the deliberation simulator.

mod commands;
mod error;
mod options;
pub mod server;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use commands::BackendSpec;
pub use error::CliError;
pub use options::{BackendArgs, BackendKind, Cli, Command, InputArgs};

/// Parses `argv`, runs the subcommand, and returns the process exit status.
/// Failures are reported on stderr as one `error[<kind>]: <message>` line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let rendered = e.render().to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            let err = CliError::usage(first);
            report(&err);
            let _ = writeln!(std::io::stderr(), "{}", rendered.trim_end());
            return err.exit_code();
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}

fn report(e: &CliError) {
    let _ = writeln!(std::io::stderr(), "{}", e.line());
}
