//! Command-line and HTTP front end for the codemem runtime.

pub mod app;
pub mod commands;
pub mod config;
pub mod server;
