//! Library side of the `gibr` command: config handling, scene files and the
//! command implementations.

pub mod commands;
pub mod config;
pub mod scenefile;
