//! Benchmark harness: accuracy over seeds, TTFT campaigns, configuration
//! sweeps, selection and table output.

mod answer;
mod runner;
mod stats;
mod sweep;
mod table;
mod ttft;

use thiserror::Error;

use crate::pipeline::PipelineError;

pub use answer::parse_answer;
pub use runner::{
    answer_key, load_items, run_benchmark, AuditEntry, BenchmarkConfig, BenchmarkItem, BenchmarkReport, ItemResult,
    SeedAccuracy, StreamSource,
};
pub use stats::MeanStd;
pub use sweep::{run_sweep, BuildBackend, select_configuration, Criterion, GridPoint, SelectionPolicy, SweepConfig, SweepRow};
pub use table::{emit_table, write_table, AccuracyRow, MetricsTable, TableFormat, TableRows, TtftRow};
pub use ttft::{measure_ttft, TtftFixture, TtftReport};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("all {failures} samples failed; last error: {last}")]
    CampaignFailed { failures: usize, last: String },
    #[error("no configuration satisfies the budget")]
    NoFeasibleConfiguration,
    #[error("unknown table format {0:?} (expected csv or markdown)")]
    UnknownFormat(String),
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
