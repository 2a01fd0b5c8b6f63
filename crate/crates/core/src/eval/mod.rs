//! Error metrics, trajectory geometry, solver comparisons and latency
//! measurement.

mod compare;
mod latency;
mod metrics;
mod pca;

pub use compare::{
    baseline_contender, compare_solvers, default_schedule_kind, rows_to_csv, CompareRow, Contender,
};
pub use latency::{bench_branch_counts, latency_bench, BranchLatency, LatencyStats};
pub use metrics::{
    endpoint_error, energy_distance, oracle_endpoint, oracle_endpoints, oracle_trajectory,
    trajectory_error, ORACLE_SUBSTEPS,
};
pub use pca::{pca_residual_analysis, pca_trajectory, PcaReport};
