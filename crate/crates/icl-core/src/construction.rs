//! Fixed-weight attention stacks whose forward pass runs gradient descent
//! on in-context linear regression, plus the independent GD oracle they are
//! verified against.
//!
//! Token layout: each context pair occupies one row `[x_i | c_i]` with the
//! y-slot starting at `c_i = y_i`; the query row is `[x | 0]`. A layer
//! attends from every row to the *context* rows only, reads the y-slot
//! through the value path, and subtracts the attended value from each row's
//! y-slot with step `1/√L` (the residual normalization):
//!
//! - linear mode: `c_j ← c_j − (1/√L) · Σ_i (x_i·x_j/√d) · c_i`, which is
//!   exactly one least-squares GD step on the implied weight vector;
//! - softmax mode: scores pass through a softmax at temperature `√d` and a
//!   paired uniform head subtracts the softmax's mean term
//!   (`Σ_i α_ij c_i − (1/k) Σ_i c_i`), leaving a update that approaches the
//!   gradient direction as the width grows.
//!
//! After `ℓ` layers every y-slot holds `y_j − w_ℓ·x_j` for the implied GD
//! iterate `w_ℓ`, so the prediction is the negated query y-slot, and the
//! iterate itself is read off basis-vector probe rows.
//!
//! The width `d` enters only through the `1/√d` score temperature: slots
//! beyond `d_x + d_y` are zero-padding and are elided from the state.

use serde::Serialize;
use thiserror::Error;

use crate::seeds;
use crate::tasks::{self, Episode, TaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ConstructionError {
    #[error("context must be nonempty")]
    EmptyContext,
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Softmax,
    Linear,
}

impl std::str::FromStr for AttentionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax" => Ok(AttentionMode::Softmax),
            "linear" => Ok(AttentionMode::Linear),
            other => Err(format!("unknown attention mode '{other}'")),
        }
    }
}

/// The explicit construction: `k_steps` identical layers of fixed `{0,1}`
/// weight patterns. No trainable parameters.
#[derive(Debug, Clone)]
pub struct ConstructedStack {
    pub k_steps: usize,
    pub d_x: usize,
    pub d_y: usize,
    /// Model width; enters through the `1/√width` score temperature.
    pub width: usize,
    pub mode: AttentionMode,
    /// Test hook: scales the value path to let fault-injection tests verify
    /// that the equivalence checks actually fail on corrupted weights.
    #[doc(hidden)]
    pub value_fault: Option<f64>,
}

pub fn build_constructed_stack(
    k_steps: usize,
    d_x: usize,
    d_y: usize,
    width: usize,
    mode: AttentionMode,
) -> Result<ConstructedStack, ConstructionError> {
    if d_x == 0 || d_y == 0 {
        return Err(ConstructionError::Dimension("zero token dimension".into()));
    }
    if width < d_x + d_y {
        return Err(ConstructionError::Dimension(format!(
            "width {width} cannot hold d_x + d_y = {}",
            d_x + d_y
        )));
    }
    Ok(ConstructedStack {
        k_steps,
        d_x,
        d_y,
        width,
        mode,
        value_fault: None,
    })
}

impl ConstructedStack {
    fn token_width(&self) -> usize {
        self.d_x + self.d_y
    }

    /// Query projection: identity on the x-slots, zero elsewhere.
    pub fn query_matrix(&self) -> Tensor {
        self.diag_on(0, self.d_x)
    }

    /// Key projection: same block pattern as the query projection.
    pub fn key_matrix(&self) -> Tensor {
        self.diag_on(0, self.d_x)
    }

    /// Value projection `[0 | I]`: reads the y-slot. The bottom-right
    /// `d_y × d_y` block is the identity.
    pub fn value_matrix(&self) -> Tensor {
        let p = self.token_width();
        let mut t = Tensor::zeros(vec![self.d_y, p]);
        for r in 0..self.d_y {
            t.data[r * p + self.d_x + r] = 1.0;
        }
        t
    }

    /// Output injection: writes the attended value back into the y-slot.
    pub fn output_matrix(&self) -> Tensor {
        let p = self.token_width();
        let mut t = Tensor::zeros(vec![p, self.d_y]);
        for r in 0..self.d_y {
            t.data[(self.d_x + r) * self.d_y + r] = 1.0;
        }
        t
    }

    fn diag_on(&self, start: usize, len: usize) -> Tensor {
        let p = self.token_width();
        let mut t = Tensor::zeros(vec![p, p]);
        for i in start..start + len {
            t.data[i * p + i] = 1.0;
        }
        t
    }

    /// Per-layer GD step size realized by the linear-attention mode:
    /// `1/(√L · √d)`.
    pub fn linear_step_size(&self) -> f64 {
        1.0 / ((self.k_steps.max(1) as f64).sqrt() * (self.width as f64).sqrt())
    }
}

/// Directly-coded gradient descent on the in-context least-squares loss;
/// the ground truth the construction is checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct GDOracle {
    pub w: Vec<f64>,
    pub eta: f64,
}

impl GDOracle {
    pub fn zeros(d_x: usize, eta: f64) -> Self {
        GDOracle {
            w: vec![0.0; d_x],
            eta,
        }
    }
}

/// One full-batch GD step `w ← w + η·Σᵢ (yᵢ − w·xᵢ)xᵢ` (no `1/k` factor).
pub fn oracle_gd_step(oracle: &GDOracle, episode: &Episode) -> Result<GDOracle, ConstructionError> {
    if episode.xs.is_empty() {
        return Err(ConstructionError::EmptyContext);
    }
    let mut w = oracle.w.clone();
    let grad = oracle_gradient(&oracle.w, episode);
    for (wv, g) in w.iter_mut().zip(&grad) {
        *wv += oracle.eta * g;
    }
    Ok(GDOracle {
        w,
        eta: oracle.eta,
    })
}

/// `Σᵢ (yᵢ − w·xᵢ)xᵢ`, the negative gradient of the context least-squares
/// loss.
pub fn oracle_gradient(w: &[f64], episode: &Episode) -> Vec<f64> {
    let d_x = w.len();
    let mut g = vec![0.0; d_x];
    for (x, y) in episode.xs.iter().zip(&episode.ys) {
        let resid = y[0] - dot(w, x);
        for (gv, xv) in g.iter_mut().zip(x) {
            *gv += resid * xv;
        }
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Result of running the stack on one episode with probe rows attached.
#[derive(Debug, Clone)]
pub struct ConstructedForward {
    /// Prediction for the episode query (d_y = 1).
    pub prediction: Vec<f64>,
    /// Implied weight after each layer; index 0 is the zero initial iterate.
    pub implied_w: Vec<Vec<f64>>,
    /// Context-fit loss `Σᵢ cᵢ²` after each layer, index 0 before any layer.
    pub context_fit: Vec<f64>,
}

/// Run the stack on an episode. Basis-vector probe rows ride along to read
/// the implied weight off the y-slots after every layer.
pub fn forward_constructed(
    stack: &ConstructedStack,
    episode: &Episode,
) -> Result<ConstructedForward, ConstructionError> {
    if episode.xs.is_empty() {
        return Err(ConstructionError::EmptyContext);
    }
    if stack.d_y != 1 {
        return Err(ConstructionError::Contract(
            "forward_constructed supports d_y = 1".into(),
        ));
    }
    let d_x = stack.d_x;
    if episode.query.len() != d_x || episode.xs.iter().any(|x| x.len() != d_x) {
        return Err(ConstructionError::Dimension(format!(
            "episode dims do not match d_x = {d_x}"
        )));
    }
    let k = episode.xs.len();
    let temp = (stack.width as f64).sqrt();
    let eta_residual = 1.0 / (stack.k_steps.max(1) as f64).sqrt();
    let fault = stack.value_fault.unwrap_or(0.0);

    // rows: k context, d_x probes, 1 query; x-parts never change
    let mut xcols: Vec<&[f64]> = episode.xs.iter().map(|x| x.as_slice()).collect();
    let probes: Vec<Vec<f64>> = (0..d_x)
        .map(|m| {
            let mut e = vec![0.0; d_x];
            e[m] = 1.0;
            e
        })
        .collect();
    for p in &probes {
        xcols.push(p.as_slice());
    }
    xcols.push(episode.query.as_slice());
    let rows = xcols.len();

    let mut c: Vec<f64> = episode.ys.iter().map(|y| y[0]).collect();
    c.resize(rows, 0.0);

    // pairwise scores depend only on the fixed x-parts
    let mut scores = vec![0.0; rows * k];
    for (j, xj) in xcols.iter().enumerate() {
        for (i, xi) in xcols[..k].iter().enumerate() {
            scores[j * k + i] = dot(xi, xj);
        }
    }

    let read_implied = |c: &[f64]| -> Vec<f64> { (0..d_x).map(|m| -c[k + m]).collect() };
    let fit = |c: &[f64]| -> f64 { c[..k].iter().map(|v| v * v).sum() };

    let mut implied_w = vec![read_implied(&c)];
    let mut context_fit = vec![fit(&c)];

    for _ in 0..stack.k_steps {
        let mut updates = vec![0.0; rows];
        match stack.mode {
            AttentionMode::Linear => {
                for j in 0..rows {
                    let mut u = 0.0;
                    for i in 0..k {
                        u += (scores[j * k + i] / temp) * c[i] * (1.0 + fault);
                    }
                    updates[j] = u;
                }
            }
            AttentionMode::Softmax => {
                let c_mean = c[..k].iter().sum::<f64>() / k as f64;
                for j in 0..rows {
                    let row = &scores[j * k..(j + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut exps = vec![0.0; k];
                    let mut z = 0.0;
                    for i in 0..k {
                        let e = ((row[i] - max) / temp).exp();
                        exps[i] = e;
                        z += e;
                    }
                    let mut u = 0.0;
                    for i in 0..k {
                        u += (exps[i] / z) * c[i] * (1.0 + fault);
                    }
                    // paired uniform head cancels the softmax mean term
                    updates[j] = u - c_mean;
                }
            }
        }
        for j in 0..rows {
            c[j] -= eta_residual * updates[j];
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(ConstructionError::NonFinite("constructed forward"));
        }
        implied_w.push(read_implied(&c));
        context_fit.push(fit(&c));
    }

    Ok(ConstructedForward {
        prediction: vec![-c[rows - 1]],
        implied_w,
        context_fit,
    })
}

/// Max over layers of `‖implied wₗ − oracle wₗ‖` with the oracle run at the
/// stack's own step size. In linear mode this is float noise.
pub fn linear_equivalence_deviation(
    stack: &ConstructedStack,
    episode: &Episode,
) -> Result<f64, ConstructionError> {
    let fwd = forward_constructed(stack, episode)?;
    let mut oracle = GDOracle::zeros(stack.d_x, stack.linear_step_size());
    let mut max_dev = norm_diff(&fwd.implied_w[0], &oracle.w);
    for layer in 1..=stack.k_steps {
        oracle = oracle_gd_step(&oracle, episode)?;
        max_dev = max_dev.max(norm_diff(&fwd.implied_w[layer], &oracle.w));
    }
    Ok(max_dev)
}

/// Mean over layers of `‖Δwₗ − η̂ₗ·gₗ‖` where `η̂ₗ` is the least-squares
/// matched step against the oracle gradient at the implied iterate. The
/// softmax linearization error makes this shrink like `1/√d`.
pub fn discrepancy_vs_oracle(
    stack: &ConstructedStack,
    episode: &Episode,
) -> Result<f64, ConstructionError> {
    let fwd = forward_constructed(stack, episode)?;
    let mut total = 0.0;
    for layer in 0..stack.k_steps {
        let delta: Vec<f64> = fwd.implied_w[layer + 1]
            .iter()
            .zip(&fwd.implied_w[layer])
            .map(|(a, b)| a - b)
            .collect();
        let g = oracle_gradient(&fwd.implied_w[layer], episode);
        let gg = dot(&g, &g);
        let eta_hat = if gg > 0.0 { dot(&delta, &g) / gg } else { 0.0 };
        let resid: f64 = delta
            .iter()
            .zip(&g)
            .map(|(d, g)| (d - eta_hat * g) * (d - eta_hat * g))
            .sum::<f64>()
            .sqrt();
        total += resid;
    }
    Ok(total / stack.k_steps.max(1) as f64)
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// One cell of the effective-learning-rate table.
#[derive(Debug, Clone, Serialize)]
pub struct EtaCell {
    pub depth: usize,
    pub width: usize,
    /// Mean per-layer `‖attention update‖ / ‖oracle gradient‖`, the ratio
    /// definition of the effective learning rate (residual `1/√L`
    /// normalization included).
    pub eta_eff: f64,
    /// `depth × eta_eff`: the cumulative effect over all layers.
    pub eta_cumulative: f64,
    pub n_episodes: usize,
    pub n_excluded: usize,
}

/// Measure η_eff on an (L, d) grid. Episodes are shared across cells so the
/// episode-dependent factor cancels out of scaling fits.
pub fn measure_eta_eff(
    l_grid: &[usize],
    d_grid: &[usize],
    mode: AttentionMode,
    d_x: usize,
    k: usize,
    episodes_per_cell: usize,
    seed: u64,
) -> Result<Vec<EtaCell>, ConstructionError> {
    if episodes_per_cell == 0 {
        return Err(ConstructionError::Contract("need at least one episode".into()));
    }
    let spec = TaskSpec::linear(d_x, 0.0);
    let episodes: Vec<Episode> = (0..episodes_per_cell)
        .map(|e| {
            let task = tasks::sample_task(&spec, seeds::derive(seed, "eta-task", e as u64))
                .map_err(|err| ConstructionError::Contract(err.to_string()))?;
            Ok(tasks::sample_episode(
                &task,
                k,
                seeds::derive(seed, "eta-episode", e as u64),
            ))
        })
        .collect::<Result<_, ConstructionError>>()?;
    measure_eta_eff_on_episodes(l_grid, d_grid, mode, d_x, &episodes)
}

/// Grid measurement over caller-supplied episodes.
pub fn measure_eta_eff_on_episodes(
    l_grid: &[usize],
    d_grid: &[usize],
    mode: AttentionMode,
    d_x: usize,
    episodes: &[Episode],
) -> Result<Vec<EtaCell>, ConstructionError> {
    if l_grid.is_empty() || d_grid.is_empty() {
        return Err(ConstructionError::Contract("empty grid".into()));
    }
    let mut cells = Vec::with_capacity(l_grid.len() * d_grid.len());
    for &depth in l_grid {
        for &width in d_grid {
            let stack = build_constructed_stack(depth, d_x, 1, width, mode)?;
            let mut ratios = Vec::new();
            let mut excluded = 0usize;
            for ep in episodes {
                let fwd = forward_constructed(&stack, ep)?;
                let mut ep_ratios = Vec::with_capacity(depth);
                let mut degenerate = false;
                for layer in 0..depth {
                    let g = oracle_gradient(&fwd.implied_w[layer], ep);
                    let gnorm = dot(&g, &g).sqrt();
                    if gnorm < 1e-12 {
                        degenerate = true;
                        break;
                    }
                    let delta: Vec<f64> = fwd.implied_w[layer + 1]
                        .iter()
                        .zip(&fwd.implied_w[layer])
                        .map(|(a, b)| a - b)
                        .collect();
                    ep_ratios.push(dot(&delta, &delta).sqrt() / gnorm);
                }
                if degenerate {
                    excluded += 1;
                } else {
                    ratios.extend(ep_ratios);
                }
            }
            if ratios.is_empty() {
                return Err(ConstructionError::Contract(format!(
                    "all episodes excluded at L={depth}, d={width}"
                )));
            }
            let eta_eff = ratios.iter().sum::<f64>() / ratios.len() as f64;
            cells.push(EtaCell {
                depth,
                width,
                eta_eff,
                eta_cumulative: depth as f64 * eta_eff,
                n_episodes: episodes.len() - excluded,
                n_excluded: excluded,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{sample_episode, sample_task};

    fn episode_from(xs: Vec<Vec<f64>>, ys: Vec<f64>, query: Vec<f64>) -> Episode {
        Episode {
            xs,
            ys: ys.into_iter().map(|y| vec![y]).collect(),
            target: vec![0.0],
            query,
        }
    }

    #[test]
    fn oracle_single_pair_hand_gradient() {
        // w=0, (x=[1,0], y=2), η=0.1: step = η·(y − w·x)·x = 0.1·2·[1,0]
        let ep = episode_from(vec![vec![1.0, 0.0]], vec![2.0], vec![0.0, 0.0]);
        let o = GDOracle::zeros(2, 0.1);
        let o2 = oracle_gd_step(&o, &ep).unwrap();
        assert_eq!(o2.w, vec![0.2, 0.0]);
        // second step: w = 0.2 + 0.1·(2 − 0.2)·1 = 0.38
        let o3 = oracle_gd_step(&o2, &ep).unwrap();
        assert!((o3.w[0] - 0.38).abs() < 1e-15);
    }

    #[test]
    fn oracle_fixed_point_on_zero_residuals() {
        let w_true = vec![1.5, -2.0];
        let xs = vec![vec![1.0, 1.0], vec![2.0, -1.0]];
        let ys: Vec<f64> = xs.iter().map(|x| dot(&w_true, x)).collect();
        let ep = episode_from(xs, ys, vec![0.0, 0.0]);
        let o = GDOracle {
            w: w_true.clone(),
            eta: 0.05,
        };
        let o2 = oracle_gd_step(&o, &ep).unwrap();
        assert_eq!(o2.w, w_true);
    }

    #[test]
    fn oracle_converges_to_least_squares_solution() {
        let spec = TaskSpec::linear(4, 0.0);
        let task = sample_task(&spec, 77).unwrap();
        let ep = sample_episode(&task, 16, 5);
        // normal-equation solve as the independent oracle
        let mut ata = vec![0.0; 16];
        let mut aty = vec![0.0; 4];
        for (x, y) in ep.xs.iter().zip(&ep.ys) {
            for i in 0..4 {
                for j in 0..4 {
                    ata[i * 4 + j] += x[i] * x[j];
                }
                aty[i] += x[i] * y[0];
            }
        }
        let w_star = solve4(&ata, &aty);
        let mut o = GDOracle::zeros(4, 0.01);
        for _ in 0..200 {
            o = oracle_gd_step(&o, &ep).unwrap();
        }
        assert!(norm_diff(&o.w, &w_star) < 1e-6, "‖w − w*‖ too large");
    }

    // tiny Gaussian elimination for the 4×4 normal equations
    fn solve4(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut m = [[0.0f64; 5]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = a[i * 4 + j];
            }
            m[i][4] = b[i];
        }
        for col in 0..4 {
            let piv = (col..4).max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs())).unwrap();
            m.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = m[r][col] / m[col][col];
                    for c in col..5 {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
        (0..4).map(|i| m[i][4] / m[i][i]).collect()
    }

    #[test]
    fn empty_context_is_contract_error() {
        let ep = episode_from(vec![], vec![], vec![1.0]);
        let o = GDOracle::zeros(1, 0.1);
        assert!(matches!(
            oracle_gd_step(&o, &ep),
            Err(ConstructionError::EmptyContext)
        ));
    }

    #[test]
    fn stack_matrices_are_zero_one_block_patterns() {
        for (d_x, d_y, width) in [(3usize, 1usize, 8usize), (5, 2, 16)] {
            let s = build_constructed_stack(2, d_x, d_y, width, AttentionMode::Linear).unwrap();
            let p = d_x + d_y;
            for m in [s.query_matrix(), s.key_matrix()] {
                assert_eq!(m.shape, vec![p, p]);
                for i in 0..p {
                    for j in 0..p {
                        let want = if i == j && i < d_x { 1.0 } else { 0.0 };
                        assert_eq!(m.at2(i, j), want);
                    }
                }
            }
            let v = s.value_matrix();
            assert_eq!(v.shape, vec![d_y, p]);
            for i in 0..d_y {
                for j in 0..p {
                    let want = if j == d_x + i { 1.0 } else { 0.0 };
                    assert_eq!(v.at2(i, j), want);
                }
            }
            // bottom-right block of the value path is the identity on the y-slot
            assert_eq!(v.at2(d_y - 1, p - 1), 1.0);
            let o = s.output_matrix();
            assert_eq!(o.shape, vec![p, d_y]);
            for i in 0..p {
                for j in 0..d_y {
                    let want = if i == d_x + j { 1.0 } else { 0.0 };
                    assert_eq!(o.at2(i, j), want);
                }
            }
        }
    }

    #[test]
    fn zero_step_stack_is_identity() {
        let spec = TaskSpec::linear(3, 0.0);
        let task = sample_task(&spec, 4).unwrap();
        let ep = sample_episode(&task, 5, 9);
        let s = build_constructed_stack(0, 3, 1, 8, AttentionMode::Softmax).unwrap();
        let fwd = forward_constructed(&s, &ep).unwrap();
        assert_eq!(fwd.implied_w, vec![vec![0.0; 3]]);
        assert_eq!(fwd.prediction, vec![0.0]);
    }

    #[test]
    fn linear_mode_first_layer_matches_oracle_tightly() {
        let spec = TaskSpec::linear(4, 0.0);
        for seed in 0..20u64 {
            let task = sample_task(&spec, seed).unwrap();
            let ep = sample_episode(&task, 8, seed + 100);
            let s = build_constructed_stack(1, 4, 1, 64, AttentionMode::Linear).unwrap();
            let fwd = forward_constructed(&s, &ep).unwrap();
            let o = oracle_gd_step(&GDOracle::zeros(4, s.linear_step_size()), &ep).unwrap();
            assert!(norm_diff(&fwd.implied_w[1], &o.w) < 1e-10);
        }
    }

    #[test]
    fn zero_residual_episode_is_a_fixed_point() {
        // context already fit by w=0 means all ys are zero
        let ep = episode_from(
            vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            vec![0.0, 0.0],
            vec![0.3, 0.4],
        );
        let s = build_constructed_stack(3, 2, 1, 16, AttentionMode::Linear).unwrap();
        let fwd = forward_constructed(&s, &ep).unwrap();
        for w in &fwd.implied_w {
            assert_eq!(w, &vec![0.0, 0.0]);
        }
        assert_eq!(fwd.prediction, vec![0.0]);
    }

    #[test]
    fn softmax_discrepancy_monotone_on_fixed_episode() {
        let spec = TaskSpec::linear(4, 0.0);
        let task = sample_task(&spec, 3).unwrap();
        let ep = sample_episode(&task, 16, 8);
        let mut prev = f64::INFINITY;
        for &d in &[64usize, 128, 256, 512, 1024] {
            let s = build_constructed_stack(4, 4, 1, d, AttentionMode::Softmax).unwrap();
            let disc = discrepancy_vs_oracle(&s, &ep).unwrap();
            assert!(disc < prev, "discrepancy not monotone at d={d}");
            prev = disc;
        }
    }

    #[test]
    fn softmax_discrepancy_decays_like_inverse_sqrt_width() {
        // mean discrepancy over a batch of episodes; single episodes carry
        // an episode-dependent mix of the 1/√d and 1/d error terms
        let spec = TaskSpec::linear(8, 0.0);
        let mut points = Vec::new();
        for &d in &[64usize, 128, 256, 512, 1024] {
            let s = build_constructed_stack(4, 8, 1, d, AttentionMode::Softmax).unwrap();
            let mut total = 0.0;
            for e in 0..50u64 {
                let task = sample_task(&spec, e).unwrap();
                let ep = sample_episode(&task, 4, 500 + e);
                total += discrepancy_vs_oracle(&s, &ep).unwrap();
            }
            points.push(((d as f64).ln(), (total / 50.0).ln()));
        }
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
        assert!(
            (slope + 0.5).abs() < 0.15,
            "softmax decay slope {slope} not in −0.5 ± 0.15"
        );
    }

    #[test]
    fn context_fit_loss_nonincreasing_in_layers() {
        let spec = TaskSpec::linear(4, 0.0);
        for seed in 0..10u64 {
            let task = sample_task(&spec, seed).unwrap();
            let ep = sample_episode(&task, 16, seed);
            let s = build_constructed_stack(8, 4, 1, 256, AttentionMode::Linear).unwrap();
            let fwd = forward_constructed(&s, &ep).unwrap();
            for pair in fwd.context_fit.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-12,
                    "context fit increased: {pair:?}"
                );
            }
        }
    }

    #[test]
    fn eta_eff_scaling_in_width_and_depth() {
        let cells = measure_eta_eff(
            &[4],
            &[64, 256],
            AttentionMode::Softmax,
            4,
            12,
            8,
            42,
        )
        .unwrap();
        // fixed L, d quadrupled → η_eff halves (within 20%)
        let ratio = cells[0].eta_eff / cells[1].eta_eff;
        assert!((ratio - 2.0).abs() < 0.4, "width scaling ratio {ratio}");

        let cells = measure_eta_eff(
            &[2, 8],
            &[128],
            AttentionMode::Softmax,
            4,
            12,
            8,
            42,
        )
        .unwrap();
        // fixed d, L quadrupled → cumulative η_eff doubles (within 20%)
        let ratio = cells[1].eta_cumulative / cells[0].eta_cumulative;
        assert!((ratio - 2.0).abs() < 0.4, "depth scaling ratio {ratio}");
    }

    #[test]
    fn eta_eff_excludes_and_flags_zero_gradient_episodes() {
        let degenerate = episode_from(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![0.0, 0.0],
            vec![1.0, 1.0, 1.0],
        );
        let spec = TaskSpec::linear(3, 0.0);
        let task = sample_task(&spec, 2).unwrap();
        let good = sample_episode(&task, 4, 3);
        let cells = measure_eta_eff_on_episodes(
            &[2],
            &[32],
            AttentionMode::Linear,
            3,
            &[degenerate, good],
        )
        .unwrap();
        assert_eq!(cells[0].n_excluded, 1);
        assert_eq!(cells[0].n_episodes, 1);
    }

    #[test]
    fn value_fault_breaks_equivalence() {
        let spec = TaskSpec::linear(4, 0.0);
        let task = sample_task(&spec, 3).unwrap();
        let ep = sample_episode(&task, 8, 1);
        let mut s = build_constructed_stack(2, 4, 1, 64, AttentionMode::Linear).unwrap();
        assert!(linear_equivalence_deviation(&s, &ep).unwrap() < 1e-9);
        s.value_fault = Some(0.25);
        assert!(linear_equivalence_deviation(&s, &ep).unwrap() > 1e-3);
    }
}
