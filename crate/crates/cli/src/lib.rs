//! Command-line pipeline and HTTP service around `keyformer-core`.

pub mod commands;
pub mod config;
pub mod service;
