//! Command-line front end for the `dynmf` library.

pub mod args;
pub mod commands;
pub mod config;
pub mod store;
