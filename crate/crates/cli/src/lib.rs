//! Command-line front end and HTTP service for the attribute editor.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod model;
pub mod service;

pub use commands::{run, Cli, Command};
