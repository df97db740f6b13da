//! Files, configuration and the command line around `agedit-core`.

pub mod attention;
pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod image;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod store;

pub use error::{AppError, AppResult};
