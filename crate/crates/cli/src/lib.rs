//! Library half of the `scenegen` binary, so the acceptance tests can drive
//! the same code paths in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;
