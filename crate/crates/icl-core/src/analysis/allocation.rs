//! Depth-width allocation fits: `error ∝ L^(−a) · d^(−b)` at a fixed
//! parameter budget, and the allocation slope `log L*` vs `log N` across
//! budgets.
//!
//! A fixed-budget table with `L·d` constant makes `log L` and `log d`
//! perfectly collinear; that case degrades to a one-variable fit on depth
//! and is flagged rather than silently reported as a joint fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::power_law::{fit_log_log, LogLogFit};
use super::FitError;

const BOOTSTRAP_SEED: u64 = 0xa11_0c;
const RESAMPLES: usize = 2000;

#[derive(Debug, Clone, Serialize)]
pub struct AllocationFit {
    /// Exponent `a` in `error ∝ L^(−a)…`; under rank deficiency this is the
    /// identifiable depth slope along the budget constraint.
    pub depth_exponent: f64,
    pub depth_ci: (f64, f64),
    /// Exponent `b`; absent when the design is rank-deficient.
    pub width_exponent: Option<f64>,
    pub width_ci: Option<(f64, f64)>,
    pub r_squared: f64,
    pub rank_deficient: bool,
    pub n_points: usize,
}

/// Centered two-variable OLS of `ln err` on `(ln L, ln d)`.
/// Returns `(a, b, r²)` in the decay convention `err ∝ L^(−a) d^(−b)`.
fn two_var_fit(pts: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mz = pts.iter().map(|p| p.2).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz, mut szz) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, z) in pts {
        let (cx, cy, cz) = (x - mx, y - my, z - mz);
        sxx += cx * cx;
        sxy += cx * cy;
        syy += cy * cy;
        sxz += cx * cz;
        syz += cy * cz;
        szz += cz * cz;
    }
    let det = sxx * syy - sxy * sxy;
    let b1 = (syy * sxz - sxy * syz) / det;
    let b2 = (sxx * syz - sxy * sxz) / det;
    let ss_res = szz - (b1 * sxz + b2 * syz);
    let r2 = if szz == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / szz).clamp(0.0, 1.0)
    };
    (-b1, -b2, r2)
}

fn collinear(pts: &[(f64, f64, f64)]) -> bool {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return true;
    }
    let corr2 = (sxy * sxy) / (sxx * syy);
    corr2 > 1.0 - 1e-9
}

/// Fit `(L, d, error)` triples gathered at one parameter budget.
pub fn fit_depth_width(points: &[(f64, f64, f64)]) -> Result<AllocationFit, FitError> {
    if points.len() < 4 {
        return Err(FitError::Insufficient(format!(
            "need at least 4 (L, d, error) triples, got {}",
            points.len()
        )));
    }
    if let Some(bad) = points
        .iter()
        .find(|(l, d, e)| *l <= 0.0 || *d <= 0.0 || *e <= 0.0)
    {
        return Err(FitError::Domain(format!("nonpositive entry {bad:?}")));
    }
    let logs: Vec<(f64, f64, f64)> = points
        .iter()
        .map(|&(l, d, e)| (l.ln(), d.ln(), e.ln()))
        .collect();

    if collinear(&logs) {
        // identifiable combination only: error vs depth along the constraint
        let depth_pts: Vec<(f64, f64)> = points.iter().map(|&(l, _, e)| (l, e)).collect();
        let ll: LogLogFit = fit_log_log(&depth_pts)?;
        return Ok(AllocationFit {
            depth_exponent: -ll.slope,
            depth_ci: (-ll.ci_high, -ll.ci_low),
            width_exponent: None,
            width_ci: None,
            r_squared: ll.r_squared,
            rank_deficient: true,
            n_points: points.len(),
        });
    }

    let (a, b, r2) = two_var_fit(&logs);
    // pairs bootstrap for both exponents
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let n = logs.len();
    let mut a_s = Vec::with_capacity(RESAMPLES);
    let mut b_s = Vec::with_capacity(RESAMPLES);
    let mut attempts = 0;
    while a_s.len() < RESAMPLES && attempts < RESAMPLES * 10 {
        attempts += 1;
        let sample: Vec<(f64, f64, f64)> = (0..n).map(|_| logs[rng.gen_range(0..n)]).collect();
        if collinear(&sample) {
            continue;
        }
        let (ab, bb, _) = two_var_fit(&sample);
        a_s.push(ab);
        b_s.push(bb);
    }
    let ci = |mut v: Vec<f64>, est: f64| -> (f64, f64) {
        if v.is_empty() {
            return (est, est);
        }
        v.sort_by(f64::total_cmp);
        let lo = v[(v.len() as f64 * 0.025) as usize];
        let hi = v[((v.len() as f64 * 0.975) as usize).min(v.len() - 1)];
        (lo.min(est), hi.max(est))
    };
    Ok(AllocationFit {
        depth_exponent: a,
        depth_ci: ci(a_s, a),
        width_exponent: Some(b),
        width_ci: Some(ci(b_s, b)),
        r_squared: r2,
        rank_deficient: false,
        n_points: points.len(),
    })
}

/// Allocation slope: regress `ln L*` on `ln N` across budgets. The slope is
/// positive for depth-favoring allocations.
pub fn fit_allocation_slope(budgets: &[(f64, f64)]) -> Result<LogLogFit, FitError> {
    fit_log_log(budgets)
}
