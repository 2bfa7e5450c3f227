//! Library surface of the `bpmap` command-line tool: file ingestion,
//! run configuration, and the subcommand drivers, exposed so the CLI can
//! be exercised in-process by tests.

pub mod cli;
pub mod config;
pub mod io;

pub use cli::{run, run_with_output};
