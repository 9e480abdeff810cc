//! Configuration, file formats and the command line around `pros-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{Error, Result};
