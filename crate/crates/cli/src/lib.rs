//! Command-line interface and workbench service for the vidal engine.

pub mod cli;
pub mod config;
pub mod server;
pub mod session;
