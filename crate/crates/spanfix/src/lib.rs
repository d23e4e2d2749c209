//! Explain-and-correct pipeline, command-line driver and review service.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod service;
