//! Run configuration, persistence and experiment orchestration for the
//! `meshcast` command-line tool.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod verify;

pub use config::RunConfig;
