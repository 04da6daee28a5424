//! Experiment driver: workloads, trace audits, sweeps and acceptance checks.

pub mod acceptance;
pub mod audit;
pub mod experiment;
pub mod workload;
