//! Files, checkpoints and the command line around `cfcrs-core`.
//!
//! * [`formats`]: tab-separated graphs and JSON Lines corpora.
//! * [`checkpoint`]: the binary parameter format.
//! * [`config`]: the JSON run configuration.
//! * [`commands`]: one function per subcommand, writing through [`outputs`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod outputs;
pub mod reports;

pub use error::{Error, Result};
