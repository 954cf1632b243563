//! Black-box syscall fault injection for running processes.
//!
//! A target process tree is attached with the OS tracing facility, its
//! syscalls are perturbed (injected errno and/or delay), and its behavior is
//! monitored at the syscall, resource, and application levels across a
//! before/during/after phase protocol. Phase snapshots are diffed into
//! qualitative labels and a verdict per perturbation.

pub mod clock;
pub mod diff;
pub mod fixtures;
pub mod monitor;
pub mod orchestrator;
pub mod report;
pub mod store;
pub mod syscall_model;
mod tables;
pub mod tracer;
pub mod workload;

pub use diff::{BehaviorLabel, BehaviorSnapshot, DiffReport, Phase, PhaseSummary, Thresholds, Verdict};
pub use monitor::{MetricSample, TargetHandle};
pub use orchestrator::{CampaignConfig, CampaignResult, ExperimentResult};
pub use store::{MetricsStore, SeriesKey, TimeRange};
pub use syscall_model::{DelaySpec, ErrnoCode, SyscallId};
pub use tracer::{PerturbationSpec, SyscallEvent, TracerSession};
