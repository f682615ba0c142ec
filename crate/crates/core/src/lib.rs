//! Core model of GPU-coroutine sharing.
//!
//! Applications own persistent virtual contexts; the scheduler binds them to
//! ephemeral, quota-tiered physical contexts and may remap or preempt them at
//! any segment boundary. Kernel launch records are never rewritten, so a
//! kernel computes the same result regardless of the tier it lands on.
//!
//! The crate is `no_std` (it needs `alloc`). It contains:
//!
//! - [`model`]: contexts, kernels, memory regions, devices and the binding
//!   table, with their invariant checks.
//! - [`engine`]: an exact-rational discrete-event simulator with a
//!   contention-aware speed model.
//! - [`runtime`]: dispatch, cooperative preemption and migration costing.
//! - [`policy`]: the scheduling hooks, the reference and baseline policies,
//!   and the duration predictor.
//! - [`determinism`]: bit-exact narrow-float reductions and the
//!   immutable-launch equivalence check.
//! - [`fault`]: fault scripts, hang detection and quarantine.
//! - [`workload`], [`metrics`], [`scenario`]: request expansion, latency
//!   metrics and the scenario description consumed by the engine.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod determinism;
pub mod engine;
pub mod fault;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod rational;
pub mod report;
pub mod runtime;
pub mod scenario;
pub mod workload;

pub use rational::Rational;
