//! Emergence detection against the random baseline, plus the closed-form
//! predictions for the scaling exponent and the critical scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::FitError;
use crate::seeds;

/// Random-baseline level with Monte-Carlo uncertainty.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Baseline {
    pub mean: f64,
    pub stderr: f64,
}

/// Evaluation error of one scale point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EmergencePoint {
    pub scale: f64,
    pub mean_error: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmergenceResult {
    /// Smallest scale whose error is significantly below the baseline;
    /// `None` when no scale qualifies ("not emerged").
    pub n_c: Option<f64>,
    /// Per-scale bootstrap p-values, ascending in scale.
    pub p_values: Vec<(f64, f64)>,
}

const BOOTSTRAP: usize = 4000;

/// Parametric bootstrap p-value for `error < baseline` at one point.
/// Deterministic in the point itself, so adding points elsewhere never
/// changes it.
fn p_below(point: &EmergencePoint, baseline: &Baseline) -> f64 {
    let seed = seeds::derive(
        point.mean_error.to_bits() ^ baseline.mean.to_bits(),
        "emergence-p",
        point.scale.to_bits(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let err = Normal::new(point.mean_error, point.stderr.max(1e-300)).expect("finite");
    let base = Normal::new(baseline.mean, baseline.stderr.max(1e-300)).expect("finite");
    let mut at_or_above = 0usize;
    for _ in 0..BOOTSTRAP {
        let e: f64 = err.sample(&mut rng);
        let b: f64 = base.sample(&mut rng);
        if e >= b {
            at_or_above += 1;
        }
    }
    (1 + at_or_above) as f64 / (BOOTSTRAP + 1) as f64
}

/// Monotone scan: the smallest scale with bootstrap `p < alpha_level`, no
/// multiple-comparison correction.
pub fn detect_emergence(
    points: &[EmergencePoint],
    baseline: &Baseline,
    alpha_level: f64,
) -> EmergenceResult {
    let mut sorted: Vec<EmergencePoint> = points.to_vec();
    sorted.sort_by(|a, b| a.scale.total_cmp(&b.scale));
    let p_values: Vec<(f64, f64)> = sorted
        .iter()
        .map(|pt| (pt.scale, p_below(pt, baseline)))
        .collect();
    let n_c = p_values
        .iter()
        .find(|(_, p)| *p < alpha_level)
        .map(|(scale, _)| *scale);
    EmergenceResult { n_c, p_values }
}

/// Theoretical scaling exponent `α = 1/(2(h+1))` for hierarchy depth `h`.
pub fn predict_alpha_theory(h: usize) -> f64 {
    1.0 / (2.0 * (h as f64 + 1.0))
}

/// Critical-scale prediction `(k·h)^{2(h+1)}` with unit constant.
/// `h = 0` degenerates the formula and is rejected.
pub fn predict_critical_scale(k: usize, h: usize) -> Result<f64, FitError> {
    if k < 1 {
        return Err(FitError::Domain("k must be at least 1".into()));
    }
    if h < 1 {
        return Err(FitError::Domain(
            "critical-scale formula degenerates at h = 0".into(),
        ));
    }
    Ok(((k * h) as f64).powi(2 * (h as i32 + 1)))
}
