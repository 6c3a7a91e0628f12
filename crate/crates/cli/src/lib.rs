//! Command line and HTTP serving surface over the codevec core library:
//! configuration loading, the six subcommands, and the embedding service.

pub mod commands;
pub mod config;
pub mod output;
pub mod server;
