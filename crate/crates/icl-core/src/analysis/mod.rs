//! Scaling-law analysis: power-law and sigmoid fits with bootstrap
//! confidence intervals, emergence detection, depth-width allocation fits,
//! and the closed-form theoretical predictions they are compared against.

pub mod allocation;
pub mod emergence;
pub mod power_law;
pub mod reference;
pub mod sigmoid;

pub use allocation::{fit_allocation_slope, fit_depth_width, AllocationFit};
pub use emergence::{
    detect_emergence, predict_alpha_theory, predict_critical_scale, Baseline, EmergencePoint,
    EmergenceResult,
};
pub use power_law::{fit_context_exponent, fit_log_log, fit_power_law, FitResult, LogLogFit};
pub use sigmoid::{fit_sigmoid_emergence, PhaseFit};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("not enough data: {0}")]
    Insufficient(String),
    #[error("ill-posed fit: {0}")]
    IllPosed(String),
}
