//! File formats, configuration loading and the command-line front end for
//! [`aerocon_core`].

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod embeddings;
mod error;
pub mod losslog;
pub mod manifest;
pub mod ppm;
pub mod selftest;
pub mod settings;

pub use error::{AppError, Result};
