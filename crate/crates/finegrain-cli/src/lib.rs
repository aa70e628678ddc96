//! Library half of the command-line interface; the binary in `main.rs` is a
//! thin argument-parsing shell around [`commands`].

pub mod commands;
pub mod config;
