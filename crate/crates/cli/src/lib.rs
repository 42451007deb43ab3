//! Experiment driver for mixture-of-routers MoE-LoRA models.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod artifacts;
pub mod bench;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fault;
pub mod inspect;

pub use bench::{bench_experiment, cmd_bench};
pub use config::{ExperimentConfig, Overrides};
pub use error::CliError;
pub use experiment::{cmd_sweep, cmd_train, sweep_experiment, train_experiment, SweepReport, SweepRow, TrainRun, TrainSummary};
pub use fault::{cmd_fault, fault_experiment, FaultReport, FaultRow, FaultSummary};
pub use inspect::cmd_inspect;
