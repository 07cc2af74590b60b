//! Dataset monitoring and alerting for journalists: configure use cases
//! once, let the engine poll, compare and compute on schedule, and read
//! the findings as headline-bearing alerts.

pub mod cli;
pub mod config;
pub mod dispatch;
pub mod engine;
pub mod ingest;
pub mod rules;
pub mod schedule;
pub mod snapshot;
pub mod stats;
pub mod testkit;
pub mod value;

mod util;

pub use util::LockError;
