//! Energy-aware HTTP data-transfer engine.
//!
//! The crate plans multi-file downloads around the bandwidth-delay product of a
//! link, tunes three transfer knobs per file-size class — pipelining (requests
//! in flight on one connection), parallelism (byte-range streams per file) and
//! concurrency (simultaneous channels) — and schedules channels under one of
//! four service-level policies: minimum energy, maximum throughput, best
//! throughput-per-joule, or a fixed throughput floor. End-system energy is
//! estimated from regression-based power models fed by OS utilization metrics.
//!
//! The [`transport`] contract is satisfied both by a real HTTP/1.1 engine and
//! by a deterministic [`simulator`], so every scheduling policy can be tested
//! against closed-form oracles before it touches a network.

pub mod planner;
pub mod power;
pub mod simulator;
pub mod sla;
pub mod telemetry;
pub mod transport;
