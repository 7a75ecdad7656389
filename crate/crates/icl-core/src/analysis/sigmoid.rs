//! Two-parameter logistic fit for ICL emergence curves.
//!
//! The model is `P(N) = 1 / (1 + exp(−κ·(ln N − ln N_c)))`: a logistic in
//! log-scale for conditioning, with `N_c` reported back in raw scale.
//! Levenberg-Marquardt with multi-start initialization; κ is optimized as
//! `exp(q)` so it stays positive.

use serde::Serialize;

use super::FitError;

#[derive(Debug, Clone, Serialize)]
pub struct PhaseFit {
    /// Critical scale, raw units.
    pub n_c: f64,
    /// Steepness per log-unit of scale.
    pub kappa: f64,
    /// Root of the summed squared residuals at the optimum.
    pub residual: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Sum of squared residuals and its gradient pieces at `(q, m)`.
fn sse(points: &[(f64, f64)], q: f64, m: f64) -> f64 {
    let kappa = q.exp();
    points
        .iter()
        .map(|&(x, p)| {
            let r = sigmoid(kappa * (x - m)) - p;
            r * r
        })
        .sum()
}

fn lm_refine(points: &[(f64, f64)], mut q: f64, mut m: f64) -> (f64, f64, f64) {
    let mut lambda = 1e-3;
    let mut best = sse(points, q, m);
    for _ in 0..200 {
        let kappa = q.exp();
        // jtj and jtr for the 2-parameter system
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, p) in points {
            let s = sigmoid(kappa * (x - m));
            let r = s - p;
            let sp = s * (1.0 - s);
            let dq = sp * kappa * (x - m); // ∂r/∂q with κ = e^q
            let dm = -sp * kappa; // ∂r/∂m
            a11 += dq * dq;
            a12 += dq * dm;
            a22 += dm * dm;
            b1 += dq * r;
            b2 += dm * r;
        }
        let mut improved = false;
        for _ in 0..8 {
            let d11 = a11 * (1.0 + lambda);
            let d22 = a22 * (1.0 + lambda);
            let det = d11 * d22 - a12 * a12;
            if det.abs() < 1e-300 {
                break;
            }
            let dq = (-b1 * d22 + b2 * a12) / det;
            let dm = (-b2 * d11 + b1 * a12) / det;
            let q_new = (q + dq).clamp(-20.0, 20.0);
            let m_new = m + dm;
            let s_new = sse(points, q_new, m_new);
            if s_new < best {
                q = q_new;
                m = m_new;
                best = s_new;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (q, m, best)
}

/// Fit the logistic emergence curve to `(N, probability)` points.
///
/// Needs at least 6 points with mass on both sides of probability 0.5;
/// otherwise the fit is ill-posed and an error describes why.
pub fn fit_sigmoid_emergence(points: &[(f64, f64)]) -> Result<PhaseFit, FitError> {
    if points.len() < 6 {
        return Err(FitError::Insufficient(format!(
            "need at least 6 points, got {}",
            points.len()
        )));
    }
    if let Some(bad) = points
        .iter()
        .find(|(n, p)| *n <= 0.0 || !(0.0..=1.0).contains(p))
    {
        return Err(FitError::Domain(format!("bad point {bad:?}")));
    }
    let below = points.iter().any(|(_, p)| *p < 0.5);
    let above = points.iter().any(|(_, p)| *p > 0.5);
    if !(below && above) {
        return Err(FitError::IllPosed(
            "all probabilities on one side of 0.5; the transition location is unidentifiable"
                .into(),
        ));
    }
    let logpts: Vec<(f64, f64)> = points.iter().map(|&(n, p)| (n.ln(), p)).collect();

    // multi-start: crossing-point estimate plus log-scale quantiles × κ grid
    let mut xs: Vec<f64> = logpts.iter().map(|(x, _)| *x).collect();
    xs.sort_by(f64::total_cmp);
    let crossing = logpts
        .windows(2)
        .find(|w| (w[0].1 - 0.5) * (w[1].1 - 0.5) <= 0.0)
        .map(|w| 0.5 * (w[0].0 + w[1].0));
    let mut m_starts: Vec<f64> = vec![
        xs[0],
        xs[xs.len() / 4],
        xs[xs.len() / 2],
        xs[3 * xs.len() / 4],
        xs[xs.len() - 1],
    ];
    if let Some(c) = crossing {
        m_starts.push(c);
    }
    let q_starts = [-1.386, 0.0, 1.386, 2.773, 4.159]; // κ ∈ {0.25, 1, 4, 16, 64}

    let mut best: Option<(f64, f64, f64)> = None;
    for &m0 in &m_starts {
        for &q0 in &q_starts {
            let (q, m, s) = lm_refine(&logpts, q0, m0);
            if best.is_none() || s < best.unwrap().2 {
                best = Some((q, m, s));
            }
        }
    }
    let (q, m, s) = best.expect("at least one start");
    Ok(PhaseFit {
        n_c: m.exp(),
        kappa: q.exp(),
        residual: s.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_logistic_recovered_within_one_percent() {
        // κ=2 per log-unit, N_c = 1e5
        let n_c: f64 = 1e5;
        let kappa = 2.0;
        let points: Vec<(f64, f64)> = (0..12)
            .map(|i| {
                let n = 1e2 * 10f64.powf(i as f64 * 0.5);
                let p = sigmoid(kappa * (n.ln() - n_c.ln()));
                (n, p)
            })
            .collect();
        let fit = fit_sigmoid_emergence(&points).unwrap();
        assert!((fit.kappa - kappa).abs() / kappa < 0.01, "κ {}", fit.kappa);
        assert!((fit.n_c - n_c).abs() / n_c < 0.01, "N_c {}", fit.n_c);
        assert!(fit.residual < 1e-6);
    }

    #[test]
    fn one_sided_data_is_ill_posed() {
        let points: Vec<(f64, f64)> = (1..=8).map(|i| (10f64.powi(i), 0.1)).collect();
        assert!(matches!(
            fit_sigmoid_emergence(&points),
            Err(FitError::IllPosed(_))
        ));
    }

    #[test]
    fn step_function_puts_critical_scale_at_the_step() {
        // κ → ∞: probabilities jump from 0 to 1 between 1e4 and 1e5
        let grid = [1e2, 1e3, 1e4, 1e5, 1e6, 1e7];
        let points: Vec<(f64, f64)> = grid
            .iter()
            .map(|&n| (n, if n >= 1e5 { 1.0 } else { 0.0 }))
            .collect();
        let fit = fit_sigmoid_emergence(&points).unwrap();
        // within one grid spacing of the step location
        assert!(
            fit.n_c > 1e4 && fit.n_c < 1e6,
            "N_c {} not inside the step interval",
            fit.n_c
        );
        assert!(fit.kappa > 1.0);
    }

    #[test]
    fn too_few_points_rejected() {
        let points = vec![(1e2, 0.0), (1e3, 0.2), (1e4, 0.6), (1e5, 0.9), (1e6, 1.0)];
        assert!(matches!(
            fit_sigmoid_emergence(&points),
            Err(FitError::Insufficient(_))
        ));
    }
}
