//! Command-line tooling, file formats and the session service around
//! `rcr-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod service;
pub mod session;

pub use error::{RcrError, Result};
