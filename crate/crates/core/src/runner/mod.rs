//! Configuration files, experiment orchestration, studies and the CLI.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod plots;
pub mod studies;

pub use config::{default_out_root, ExperimentConfig, ModelSection, SplitConfig, OUT_ROOT_ENV};
pub use experiment::{Experiment, PreparedData, RunRecord, TimingTotals, VerifierStatus};
pub use studies::{collect_records, report, summarize, sweep, timing, timing_study, verify_all, SummaryRow, SweepAxis, TimingRow, VerifyPlan};
