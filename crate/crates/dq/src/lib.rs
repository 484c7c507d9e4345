//! File formats, run manifests and the `dq` command line built on `dq-core`.

pub mod cli;
pub mod formats;
pub mod npy;
pub mod run;

pub use cli::{Cli, CliError};
