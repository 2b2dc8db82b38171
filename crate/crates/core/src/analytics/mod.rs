//! Pure functions over event logs: costs, session statistics and worker
//! quality flags.

mod cost;
mod quality;
mod stats;

pub use cost::{
    deployment_cost_summary, hit_base_cost, hit_base_cost_with, log_span_days, CostError,
    CostReport, CostTotals, HitCost,
};
pub use quality::{worker_quality, QualityFlag, QualityThresholds, WorkerQuality};
pub use stats::{
    nearest_rank, session_statistics, session_summaries, Histogram, Quantile, SessionStats,
    SessionSummary, FIRST_RESPONSE_PERCENTILES, RESPONSE_WINDOWS_SECS,
};

/// Mean and sample standard deviation. Both are 0 for an empty slice, and
/// the deviation is 0 for a single value.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
