//! One module per subcommand. Each takes plain typed arguments, returns
//! `anyhow::Result`, and cleans up partial outputs on failure.

pub mod ablate;
pub mod embed;
pub mod eval;
pub mod gen_data;
pub mod serve;
pub mod train;
