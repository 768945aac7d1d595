//! Command-line front end and HTTP service for the direction toolkit.

pub mod cli;
pub mod commands;
pub mod manifest;
pub mod server;
pub mod workspace;
