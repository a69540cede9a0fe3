//! Simulation runner, wall-clock benchmark and metric files.

pub mod bench;
pub mod config;
pub mod metrics;
pub mod sim;

use std::io;
use std::path::Path;

use thiserror::Error;

pub use bench::{run_benchmark, BenchConfig, BenchReport};
pub use config::SimConfig;
pub use metrics::{Histogram, LatencyStats, LatencySummary, RateSeries};
pub use sim::{run_simulation, run_simulation_with, DeliveryRecord, FeedTally, SimOutput, SubscriberTally};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const METRIC_FILES: [&str; 9] = [
    "latency_histogram.txt",
    "latency_summary.txt",
    "rate_series.txt",
    "throughput.txt",
    "usage_report.txt",
    "meter_ledger.txt",
    "deliveries.txt",
    "gaps.txt",
    "conservation.txt",
];

/// Writes every metric file of a finished run into `dir`.
pub fn emit_metrics(output: &SimOutput, dir: &Path) -> io::Result<()> {
    use metrics::*;
    write_file(dir, "latency_histogram.txt", &format_latency_histogram(&output.latency))?;
    write_file(dir, "latency_summary.txt", &format_latency_summary(&output.latency))?;
    write_file(dir, "rate_series.txt", &format_rate_series(&output.rate_series))?;
    write_file(dir, "throughput.txt", &format_throughput(&output.latency))?;
    write_file(dir, "usage_report.txt", &output.usage_report)?;
    write_file(dir, "meter_ledger.txt", &crate::permissioning::dump_ledger(&output.ledger))?;
    write_file(dir, "deliveries.txt", &sim::format_deliveries(&output.deliveries))?;
    write_file(dir, "gaps.txt", &sim::format_gaps(&output.gaps))?;
    write_file(dir, "conservation.txt", &sim::format_conservation(output))?;
    Ok(())
}
