//! Training runs, ε sweeps, activation-norm profiles, and canned
//! reproduction pipelines.

pub mod config;
pub mod l1;
pub mod reproduce;
pub mod sweep;
pub mod train;

pub use config::{AdvTrain, ArchName, ExperimentConfig, LrSchedule, Seeds};
pub use l1::{l1_profile, L1Profile, L1Summary};
pub use reproduce::{reproduce, ModelCache, PlanOptions, Reproduction, RunOptions, Target};
pub use sweep::{sweep, sweep_report, ReportFormat, SweepReport, SweepRow, CSV_HEADER};
pub use train::{train, EpochRecord, TrainLog};
