//! Command-line pipeline around `aacap-core`: WAV and manifest I/O,
//! checkpoints, the translation client, and the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod fsio;
pub mod manifest;
pub mod report;
pub mod translate;
pub mod wav;
