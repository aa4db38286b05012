//! Configuration, checkpoint files and the commands behind the `emoe`
//! binary.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use commands::{EXIT_ERROR, EXIT_HALT, EXIT_OK};
pub use config::RunConfig;
