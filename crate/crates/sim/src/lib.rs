//! Deterministic simulation: scenarios, workloads, the trace auditor and
//! the linkage-attack evaluator.

pub mod adversary;
pub mod audit;
pub mod scenario;
pub mod workload;
