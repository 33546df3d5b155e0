//! Operator-facing control plane for the testbed: an HTTP API with a live
//! line-delimited stream, experiment runs, and the `netpg` CLI.
//!
//! All state lives in a [`ControlPlane`] over a shared simulator handle.
//! Handlers and CLI subcommands call the same methods.

pub mod cli;
pub mod config;
pub mod http;
pub mod model;
pub mod service;

pub use config::ServiceConfig;
pub use model::ApiError;
pub use service::{ControlPlane, Pacer};
