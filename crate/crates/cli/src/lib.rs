//! Command implementations and the live HTTP API for the `oemstream` binary.

pub mod commands;
pub mod server;

pub use server::router;
