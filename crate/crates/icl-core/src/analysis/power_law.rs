//! Power-law fitting: ordinary least squares in log-log space with a
//! pairs bootstrap for confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::FitError;

/// Fixed bootstrap stream so every fit is reproducible.
const BOOTSTRAP_SEED: u64 = 0x5ca1_ab1e;
pub const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Plain log-log OLS result; `slope` is signed.
#[derive(Debug, Clone, Serialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_points: usize,
}

/// Fitted decay exponent for `y ∝ scale^(−exponent)`.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub exponent: f64,
    pub amplitude: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    (slope, intercept, r2)
}

/// OLS on `(ln x, ln y)` with a pairs bootstrap CI on the slope.
pub fn fit_log_log(points: &[(f64, f64)]) -> Result<LogLogFit, FitError> {
    if points.len() < 4 {
        return Err(FitError::Insufficient(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    if let Some(bad) = points.iter().find(|(x, y)| *x <= 0.0 || *y <= 0.0) {
        return Err(FitError::Domain(format!(
            "log-log fit needs positive values, got {bad:?}"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|(x, _)| x.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    if xs.windows(2).all(|w| w[0] == w[1]) {
        return Err(FitError::IllPosed("all scales identical".into()));
    }
    let (slope, intercept, r2) = ols(&xs, &ys);

    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let n = points.len();
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut attempts = 0;
    while slopes.len() < BOOTSTRAP_RESAMPLES && attempts < BOOTSTRAP_RESAMPLES * 10 {
        attempts += 1;
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let first = xs[idx[0]];
        if idx.iter().all(|&i| xs[i] == first) {
            continue; // degenerate resample, no slope
        }
        let bx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let by: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        slopes.push(ols(&bx, &by).0);
    }
    slopes.sort_by(f64::total_cmp);
    let lo = slopes[(slopes.len() as f64 * 0.025) as usize];
    let hi = slopes[((slopes.len() as f64 * 0.975) as usize).min(slopes.len() - 1)];
    Ok(LogLogFit {
        slope,
        intercept,
        r_squared: r2,
        ci_low: lo.min(slope),
        ci_high: hi.max(slope),
        n_points: n,
    })
}

/// Fit `error ∝ scale^(−exponent)` on `(scale, error)` points.
///
/// Exact (zero residual) on any noiseless power law; multiplying every
/// error by a positive constant moves only the amplitude.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<FitResult, FitError> {
    let ll = fit_log_log(points)?;
    Ok(FitResult {
        exponent: -ll.slope,
        amplitude: ll.intercept.exp(),
        // negation flips the interval
        ci_low: -ll.ci_high,
        ci_high: -ll.ci_low,
        r_squared: ll.r_squared,
        n_points: ll.n_points,
    })
}

/// Context-exponent fit `error ∝ k^(−γ)`, optionally subtracting a fitted
/// additive error floor first (disabled by default everywhere).
pub fn fit_context_exponent(
    points: &[(f64, f64)],
    fit_floor: bool,
) -> Result<(FitResult, Option<f64>), FitError> {
    if !fit_floor {
        return Ok((fit_power_law(points)?, None));
    }
    if points.len() < 4 {
        return Err(FitError::Insufficient(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    let min_y = points.iter().map(|(_, y)| *y).fold(f64::INFINITY, f64::min);
    if min_y <= 0.0 {
        return Err(FitError::Domain("errors must be positive".into()));
    }
    // profile the floor on a dense grid; the inner fit is cheap
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..200 {
        let floor = min_y * (i as f64 / 200.0) * 0.999;
        let adjusted: Vec<(f64, f64)> = points.iter().map(|(x, y)| (*x, y - floor)).collect();
        let xs: Vec<f64> = adjusted.iter().map(|(x, _)| x.ln()).collect();
        let ys: Vec<f64> = adjusted.iter().map(|(_, y)| y.ln()).collect();
        let (slope, intercept, _) = ols(&xs, &ys);
        let sse: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let e = y - (intercept + slope * x);
                e * e
            })
            .sum();
        if sse < best.0 {
            best = (sse, floor);
        }
    }
    let adjusted: Vec<(f64, f64)> = points.iter().map(|(x, y)| (*x, y - best.1)).collect();
    Ok((fit_power_law(&adjusted)?, Some(best.1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_recovered_exactly() {
        let points: Vec<(f64, f64)> = (1..=8)
            .map(|i| {
                let n = 10f64.powi(i);
                (n, 100.0 * n.powf(-0.5))
            })
            .collect();
        let fit = fit_power_law(&points).unwrap();
        assert!((fit.exponent - 0.5).abs() < 1e-10, "exponent {}", fit.exponent);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!((fit.amplitude - 100.0).abs() / 100.0 < 1e-10);
        assert!(fit.ci_low <= fit.exponent && fit.exponent <= fit.ci_high);
    }

    #[test]
    fn scale_equivariance_up_to_log_rounding() {
        let points: Vec<(f64, f64)> = (1..=10)
            .map(|i| {
                let n = 2f64.powi(i);
                (n, 3.0 * n.powf(-0.73) * (1.0 + 0.01 * (i as f64).sin()))
            })
            .collect();
        let base = fit_power_law(&points).unwrap();
        for c in [4.0, 0.125, 1e6] {
            let scaled: Vec<(f64, f64)> = points.iter().map(|(x, y)| (*x, c * y)).collect();
            let fit = fit_power_law(&scaled).unwrap();
            assert!(
                (fit.exponent - base.exponent).abs() < 1e-12,
                "exponent moved: {} vs {}",
                fit.exponent,
                base.exponent
            );
            assert!((fit.amplitude / base.amplitude - c).abs() / c < 1e-9);
        }
    }

    #[test]
    fn rejects_nonpositive_and_short_inputs() {
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (2.0, 0.5), (4.0, 0.25)]),
            Err(FitError::Insufficient(_))
        ));
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (2.0, 0.5), (4.0, -0.25), (8.0, 0.1)]),
            Err(FitError::Domain(_))
        ));
    }

    #[test]
    fn bootstrap_ci_covers_truth_on_noisy_curves() {
        // 5% multiplicative lognormal noise; coverage well above 85%
        use rand_distr::{Distribution, StandardNormal};
        let mut covered = 0;
        let trials = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..trials {
            let points: Vec<(f64, f64)> = (0..32)
                .map(|i| {
                    let n = 10f64 * 2f64.powf(i as f64 * 0.5);
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    (n, 50.0 * n.powf(-0.4) * (0.05 * eps).exp())
                })
                .collect();
            let fit = fit_power_law(&points).unwrap();
            if fit.ci_low <= 0.4 && 0.4 <= fit.ci_high {
                covered += 1;
            }
        }
        assert!(covered >= 90, "coverage {covered}/{trials}");
    }

    #[test]
    fn exact_inverse_k_decay() {
        let points: Vec<(f64, f64)> = [2.0, 5.0, 10.0, 20.0, 40.0]
            .iter()
            .map(|&k| (k, 7.0 / k))
            .collect();
        let (fit, floor) = fit_context_exponent(&points, false).unwrap();
        assert!(floor.is_none());
        assert!((fit.exponent - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn floor_subtraction_recovers_shifted_power_law() {
        let points: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0, 32.0, 64.0]
            .iter()
            .map(|&k| (k, 0.2 + 5.0 / k))
            .collect();
        let (raw, _) = fit_context_exponent(&points, false).unwrap();
        let (adj, floor) = fit_context_exponent(&points, true).unwrap();
        assert!(raw.exponent < 0.9, "raw fit should flatten, got {}", raw.exponent);
        assert!((adj.exponent - 1.0).abs() < 0.05, "floor-adjusted {}", adj.exponent);
        assert!((floor.unwrap() - 0.2).abs() < 0.05);
    }
}
