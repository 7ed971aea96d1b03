//! Library surface of the command-line tool. The binary is a thin wrapper so
//! that integration tests can drive every command in-process.

pub mod commands;
pub mod config;
pub mod output;

use clap::Parser;

pub use config::Cli;

/// Run one parsed command to completion.
pub fn execute(cli: Cli) -> sfd_core::Result<()> {
    commands::dispatch(cli)
}

/// Parse argv and run; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path as well
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

/// Invalid configs exit 2; numerical divergence exits 3 (with the last good
/// checkpoint already written); other failures exit 1.
pub fn exit_code_for(err: &sfd_core::Error) -> i32 {
    match err {
        sfd_core::Error::InvalidArgument(_)
        | sfd_core::Error::Schema(_)
        | sfd_core::Error::Json(_) => 2,
        sfd_core::Error::Diverged { .. } => 3,
        _ => 1,
    }
}
