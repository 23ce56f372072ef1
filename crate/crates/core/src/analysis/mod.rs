//! Metrics and the propagation-of-chaos harness.

mod chaos;
mod metrics;

pub use chaos::{chaos_sweep, ChaosBudget, ChaosRow, ChaosTable};
pub use metrics::{
    epsilon_rate, fit_loglog_slope, mean_stderr, resample_quantiles, w2_squared_quantile, w2_squared_to_gaussian,
    wasserstein2_1d, LogLogFit,
};
