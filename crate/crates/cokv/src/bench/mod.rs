//! Workload generation and metrics reporting.

mod report;
mod runner;
mod workload;

pub use report::{compaction_shape_stats, compute_report, CompactionShape, Report, ShapeEntry};
pub use runner::{execute_ops, run_workload};
pub use workload::{gen_operations, gen_verify_ops, zipf_sample, Op, WorkloadKind, WorkloadSpec};
