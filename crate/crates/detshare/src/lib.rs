//! Files and command-line plumbing around `detshare-core`: scenario
//! configs, request traces, synthetic arrivals, event logs, metrics JSON
//! and divergence sweeps.

pub mod config;
pub mod decimal;
pub mod eventlog;
pub mod gen;
pub mod output;
pub mod run;
pub mod sweep;
pub mod trace;

pub use detshare_core as core;
