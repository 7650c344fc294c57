//! Library side of the `kqprune` binary: configuration, checkpoints and
//! the subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
