//! Command line entry points and the HTTP inference service.

pub mod api;
pub mod cli;
pub mod config;
pub mod engine;
pub mod server;

pub use engine::{Engine, InferJob, InstanceStore, Rejection};
pub use server::{router, AppState};
