//! The `ssae` command line tool and HTTP service.

pub mod cli;
pub mod commands;
pub mod config;
pub mod run;
pub mod server;
