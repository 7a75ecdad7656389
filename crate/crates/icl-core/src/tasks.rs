//! Synthetic task families with known hierarchy depth.
//!
//! Three families: dense linear maps (depth 0), sparse linear maps
//! (depth 1), and complete binary decision trees (depth = tree depth ≥ 2).
//! Inputs are `N(0, I)` for every family so errors stay comparable.
//! Generators are pure functions of their seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Linear,
    SparseLinear,
    DecisionTree,
}

/// One task family instance description. `hierarchy_depth` is declared per
/// family: 0 for linear, 1 for sparse linear, tree depth for trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub d_x: usize,
    pub d_y: usize,
    pub hierarchy_depth: usize,
    /// Tree branching factor; always 2 here.
    pub branching: usize,
    /// Number of nonzero weights; present iff sparse.
    pub sparsity: Option<usize>,
    pub noise_std: f64,
    /// Hölder smoothness carried as inert metadata; no task instantiates it.
    pub smoothness_beta: Option<f64>,
}

impl TaskSpec {
    pub fn linear(d_x: usize, noise_std: f64) -> Self {
        TaskSpec {
            family: TaskFamily::Linear,
            d_x,
            d_y: 1,
            hierarchy_depth: 0,
            branching: 2,
            sparsity: None,
            noise_std,
            smoothness_beta: None,
        }
    }

    pub fn sparse_linear(d_x: usize, sparsity: usize, noise_std: f64) -> Self {
        TaskSpec {
            family: TaskFamily::SparseLinear,
            d_x,
            d_y: 1,
            hierarchy_depth: 1,
            branching: 2,
            sparsity: Some(sparsity),
            noise_std,
            smoothness_beta: None,
        }
    }

    pub fn decision_tree(d_x: usize, depth: usize, noise_std: f64) -> Self {
        TaskSpec {
            family: TaskFamily::DecisionTree,
            d_x,
            d_y: 1,
            hierarchy_depth: depth,
            branching: 2,
            sparsity: None,
            noise_std,
            smoothness_beta: None,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.d_x == 0 || self.d_y != 1 {
            return Err(TaskError::Spec(format!(
                "d_x={} d_y={} unsupported (families are scalar-valued)",
                self.d_x, self.d_y
            )));
        }
        if self.noise_std < 0.0 {
            return Err(TaskError::Spec("negative noise_std".into()));
        }
        match self.family {
            TaskFamily::Linear => {
                if self.hierarchy_depth != 0 {
                    return Err(TaskError::Spec("linear tasks have hierarchy depth 0".into()));
                }
                if self.sparsity.is_some() {
                    return Err(TaskError::Spec("linear tasks carry no sparsity".into()));
                }
            }
            TaskFamily::SparseLinear => {
                if self.hierarchy_depth != 1 {
                    return Err(TaskError::Spec(
                        "sparse linear tasks have hierarchy depth 1".into(),
                    ));
                }
                match self.sparsity {
                    Some(s) if s >= 1 && s <= self.d_x => {}
                    other => {
                        return Err(TaskError::Spec(format!(
                            "sparsity {other:?} must satisfy 1 ≤ s ≤ d_x"
                        )))
                    }
                }
            }
            TaskFamily::DecisionTree => {
                if self.hierarchy_depth < 2 {
                    return Err(TaskError::Spec("tree depth must be at least 2".into()));
                }
                if self.branching != 2 {
                    return Err(TaskError::Spec("only binary trees are supported".into()));
                }
                if self.sparsity.is_some() {
                    return Err(TaskError::Spec("tree tasks carry no sparsity".into()));
                }
            }
        }
        Ok(())
    }
}

/// Complete binary decision tree in heap layout: internal node `i` has
/// children `2i+1`, `2i+2`; the `2^depth` leaves follow the internal nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFn {
    pub depth: usize,
    pub split_dims: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub leaves: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskParams {
    Weights(Vec<f64>),
    Tree(TreeFn),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub spec: TaskSpec,
    pub params: TaskParams,
}

/// One sampled episode: noisy context pairs plus a noiseless query target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub query: Vec<f64>,
    pub target: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draw a task deterministically from `(spec, seed)`.
pub fn sample_task(spec: &TaskSpec, seed: u64) -> Result<TaskInstance, TaskError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match spec.family {
        TaskFamily::Linear => TaskParams::Weights(normal_vec(&mut rng, spec.d_x)),
        TaskFamily::SparseLinear => {
            let s = spec.sparsity.expect("validated");
            // support uniform over size-s subsets, N(0,1) coefficients
            let mut dims: Vec<usize> = (0..spec.d_x).collect();
            dims.shuffle(&mut rng);
            let mut w = vec![0.0; spec.d_x];
            for &d in dims.iter().take(s) {
                w[d] = StandardNormal.sample(&mut rng);
            }
            TaskParams::Weights(w)
        }
        TaskFamily::DecisionTree => {
            let depth = spec.hierarchy_depth;
            let internal = (1usize << depth) - 1;
            let split_dims = (0..internal).map(|_| rng.gen_range(0..spec.d_x)).collect();
            let thresholds = normal_vec(&mut rng, internal);
            let leaves = (0..(1usize << depth)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            TaskParams::Tree(TreeFn {
                depth,
                split_dims,
                thresholds,
                leaves,
            })
        }
    };
    Ok(TaskInstance {
        spec: spec.clone(),
        params,
    })
}

/// Evaluate the task function at `x`. Trees descend root-to-leaf; the tie
/// rule is `x[dim] ≥ threshold` goes right.
pub fn evaluate(task: &TaskInstance, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), task.spec.d_x);
    match &task.params {
        TaskParams::Weights(w) => {
            vec![w.iter().zip(x).map(|(w, x)| w * x).sum()]
        }
        TaskParams::Tree(tree) => {
            let mut node = 0usize;
            for _ in 0..tree.depth {
                let go_right = x[tree.split_dims[node]] >= tree.thresholds[node];
                node = 2 * node + 1 + usize::from(go_right);
            }
            let internal = (1usize << tree.depth) - 1;
            vec![tree.leaves[node - internal]]
        }
    }
}

/// Draw an episode deterministically from `(task, k, seed)`: `k` noisy
/// context pairs plus one noiseless query target.
pub fn sample_episode(task: &TaskInstance, k: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_x = task.spec.d_x;
    let mut xs = Vec::with_capacity(k);
    let mut ys = Vec::with_capacity(k);
    for _ in 0..k {
        let x = normal_vec(&mut rng, d_x);
        let mut y = evaluate(task, &x);
        if task.spec.noise_std > 0.0 {
            for v in &mut y {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *v += task.spec.noise_std * eps;
            }
        }
        xs.push(x);
        ys.push(y);
    }
    let query = normal_vec(&mut rng, d_x);
    let target = evaluate(task, &query);
    Episode {
        xs,
        ys,
        query,
        target,
    }
}

/// Monte-Carlo error of the best constant predictor (the task-marginal
/// mean) against noisy observations, with a standard error over tasks.
pub fn random_baseline_error(
    spec: &TaskSpec,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64), TaskError> {
    spec.validate()?;
    if n_samples < 1_000 {
        return Err(TaskError::Contract(format!(
            "baseline needs at least 1000 samples, got {n_samples}"
        )));
    }
    const DRAWS_PER_TASK: usize = 20;
    let n_tasks = n_samples.div_ceil(DRAWS_PER_TASK);
    let mut values = Vec::with_capacity(n_tasks * DRAWS_PER_TASK);
    for t in 0..n_tasks {
        let task = sample_task(spec, seeds::derive(seed, "baseline-task", t as u64))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "baseline-x", t as u64));
        for _ in 0..DRAWS_PER_TASK {
            let x = normal_vec(&mut rng, spec.d_x);
            let mut y = evaluate(&task, &x)[0];
            if spec.noise_std > 0.0 {
                let eps: f64 = StandardNormal.sample(&mut rng);
                y += spec.noise_std * eps;
            }
            values.push(y);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    // per-task mean squared deviations, then a stderr over tasks
    let mut task_errs = Vec::with_capacity(n_tasks);
    for chunk in values.chunks(DRAWS_PER_TASK) {
        let e = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chunk.len() as f64;
        task_errs.push(e);
    }
    let m = task_errs.len() as f64;
    let err_mean = task_errs.iter().sum::<f64>() / m;
    let var = task_errs.iter().map(|e| (e - err_mean) * (e - err_mean)).sum::<f64>() / (m - 1.0);
    Ok((err_mean, (var / m).sqrt()))
}

/// One JSON line per episode for cross-checking against other
/// implementations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub family: TaskFamily,
    pub d_x: usize,
    pub k: usize,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
    pub query: Vec<f64>,
    pub target: Vec<f64>,
}

impl EpisodeRecord {
    pub fn new(task: &TaskInstance, ep: &Episode) -> Self {
        EpisodeRecord {
            family: task.spec.family,
            d_x: task.spec.d_x,
            k: ep.xs.len(),
            xs: ep.xs.clone(),
            ys: ep.ys.clone(),
            query: ep.query.clone(),
            target: ep.target.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_weights_are_standard_normal() {
        // w ~ N(0, I_20): check first and second moments over many tasks
        let spec = TaskSpec::linear(20, 0.0);
        let mut all = Vec::new();
        for s in 0..500u64 {
            let t = sample_task(&spec, s).unwrap();
            let TaskParams::Weights(w) = &t.params else {
                panic!()
            };
            all.extend_from_slice(w);
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn sparse_support_is_exact_and_uniform() {
        let spec = TaskSpec::sparse_linear(20, 3, 0.0);
        let mut hits = vec![0usize; 20];
        for s in 0..2000u64 {
            let t = sample_task(&spec, s).unwrap();
            let TaskParams::Weights(w) = &t.params else {
                panic!()
            };
            let nz: Vec<usize> = w
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(nz.len(), 3);
            for i in nz {
                hits[i] += 1;
            }
        }
        // each coordinate should appear with probability 3/20
        let expect = 2000.0 * 3.0 / 20.0;
        for (i, h) in hits.iter().enumerate() {
            assert!(
                (*h as f64 - expect).abs() < 5.0 * expect.sqrt(),
                "dim {i}: {h} vs {expect}"
            );
        }
    }

    #[test]
    fn tree_structure_counts() {
        let spec = TaskSpec::decision_tree(20, 2, 0.0);
        let t = sample_task(&spec, 9).unwrap();
        let TaskParams::Tree(tree) = &t.params else {
            panic!()
        };
        assert_eq!(tree.split_dims.len(), 3);
        assert_eq!(tree.thresholds.len(), 3);
        assert_eq!(tree.leaves.len(), 4);
        assert!(tree.leaves.iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn noiseless_context_matches_function_exactly() {
        let spec = TaskSpec::linear(5, 0.0);
        let task = sample_task(&spec, 3).unwrap();
        let ep = sample_episode(&task, 4, 17);
        for (x, y) in ep.xs.iter().zip(&ep.ys) {
            assert_eq!(y, &evaluate(&task, x));
        }
        assert_eq!(ep.target, evaluate(&task, &ep.query));
    }

    #[test]
    fn noise_std_matches_spec() {
        // empirical std of (y − f(x)) over 1e5 draws within 5% of 0.1
        let spec = TaskSpec::linear(5, 0.1);
        let task = sample_task(&spec, 1).unwrap();
        let mut devs = Vec::new();
        for s in 0..1000u64 {
            let ep = sample_episode(&task, 100, s);
            for (x, y) in ep.xs.iter().zip(&ep.ys) {
                devs.push(y[0] - evaluate(&task, x)[0]);
            }
        }
        assert_eq!(devs.len(), 100_000);
        let mean = devs.iter().sum::<f64>() / devs.len() as f64;
        let std = (devs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / devs.len() as f64)
            .sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }

    #[test]
    fn empty_context_still_has_query() {
        let spec = TaskSpec::linear(5, 0.0);
        let task = sample_task(&spec, 3).unwrap();
        let ep = sample_episode(&task, 0, 17);
        assert!(ep.xs.is_empty() && ep.ys.is_empty());
        assert_eq!(ep.query.len(), 5);
        assert_eq!(ep.target.len(), 1);
    }

    #[test]
    fn coordinate_projection() {
        let spec = TaskSpec::linear(4, 0.0);
        let task = TaskInstance {
            spec,
            params: TaskParams::Weights(vec![1.0, 0.0, 0.0, 0.0]),
        };
        assert_eq!(evaluate(&task, &[3.0, 9.0, -2.0, 0.5]), vec![3.0]);
    }

    #[test]
    fn hand_built_tree_hits_all_leaves() {
        // depth 2: root splits on dim 0 at 0, children on dim 1 at 0
        let tree = TreeFn {
            depth: 2,
            split_dims: vec![0, 1, 1],
            thresholds: vec![0.0, 0.0, 0.0],
            leaves: vec![10.0, 20.0, 30.0, 40.0],
        };
        let spec = TaskSpec::decision_tree(2, 2, 0.0);
        let task = TaskInstance {
            spec,
            params: TaskParams::Tree(tree),
        };
        // left-left, left-right, right-left, right-right
        assert_eq!(evaluate(&task, &[-1.0, -1.0]), vec![10.0]);
        assert_eq!(evaluate(&task, &[-1.0, 1.0]), vec![20.0]);
        assert_eq!(evaluate(&task, &[1.0, -1.0]), vec![30.0]);
        assert_eq!(evaluate(&task, &[1.0, 1.0]), vec![40.0]);
        // tie rule: exactly at the threshold goes right
        assert_eq!(evaluate(&task, &[0.0, 0.0]), vec![40.0]);
    }

    #[test]
    fn tree_matches_path_enumeration_oracle() {
        use rand::Rng;
        let spec = TaskSpec::decision_tree(6, 3, 0.0);
        let task = sample_task(&spec, 21).unwrap();
        let TaskParams::Tree(tree) = &task.params else {
            panic!()
        };
        // brute-force oracle: test every leaf's path predicate
        let eval_by_paths = |x: &[f64]| -> f64 {
            let n_leaves = 1usize << tree.depth;
            let internal = n_leaves - 1;
            'leaf: for leaf in 0..n_leaves {
                // walk up from the leaf checking each ancestor's split
                let mut node = leaf + internal;
                let mut checks = Vec::new();
                while node > 0 {
                    let parent = (node - 1) / 2;
                    let is_right = node == 2 * parent + 2;
                    checks.push((parent, is_right));
                    node = parent;
                }
                for (p, is_right) in checks {
                    let goes_right = x[tree.split_dims[p]] >= tree.thresholds[p];
                    if goes_right != is_right {
                        continue 'leaf;
                    }
                }
                return tree.leaves[leaf];
            }
            unreachable!("some leaf must match");
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            assert_eq!(evaluate(&task, &x)[0], eval_by_paths(&x));
        }
    }

    #[test]
    fn sparse_evaluate_ignores_off_support() {
        let spec = TaskSpec::sparse_linear(4, 2, 0.0);
        let task = TaskInstance {
            spec,
            params: TaskParams::Weights(vec![0.0, 2.0, 0.0, -1.0]),
        };
        let a = evaluate(&task, &[0.0, 1.0, 0.0, 1.0]);
        let b = evaluate(&task, &[99.0, 1.0, -7.0, 1.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn determinism_of_generators() {
        let spec = TaskSpec::decision_tree(8, 3, 0.1);
        assert_eq!(sample_task(&spec, 5).unwrap(), sample_task(&spec, 5).unwrap());
        let t = sample_task(&spec, 5).unwrap();
        assert_eq!(sample_episode(&t, 7, 2), sample_episode(&t, 7, 2));
    }

    #[test]
    fn baseline_matches_gaussian_moment() {
        // E[(wᵀx)²] = d_x for w, x ~ N(0, I)
        let spec = TaskSpec::linear(20, 0.0);
        let (mean, stderr) = random_baseline_error(&spec, 200_000, 11).unwrap();
        assert!(
            (mean - 20.0).abs() < 4.0 * stderr.max(0.3),
            "baseline {mean} ± {stderr}"
        );
    }

    #[test]
    fn baseline_constant_tree_is_zero() {
        let mut spec = TaskSpec::decision_tree(4, 2, 0.0);
        spec.noise_std = 0.0;
        // all leaves equal: variance of f is exactly zero
        let task = TaskInstance {
            spec: spec.clone(),
            params: TaskParams::Tree(TreeFn {
                depth: 2,
                split_dims: vec![0, 1, 2],
                thresholds: vec![0.0; 3],
                leaves: vec![0.25; 4],
            }),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert_eq!(evaluate(&task, &x), vec![0.25]);
        }
    }

    #[test]
    fn baseline_noise_adds_variance() {
        let quiet = TaskSpec::linear(5, 0.0);
        let noisy = TaskSpec::linear(5, 0.1);
        let (b0, _) = random_baseline_error(&quiet, 400_000, 3).unwrap();
        let (b1, _) = random_baseline_error(&noisy, 400_000, 3).unwrap();
        assert!(
            ((b1 - b0) - 0.01).abs() < 0.004,
            "noise added {} instead of 0.01",
            b1 - b0
        );
    }

    #[test]
    fn spec_validation_rules() {
        assert!(TaskSpec::linear(20, 0.0).validate().is_ok());
        let mut bad = TaskSpec::linear(20, 0.0);
        bad.hierarchy_depth = 1;
        assert!(bad.validate().is_err());
        assert!(TaskSpec::sparse_linear(20, 21, 0.0).validate().is_err());
        assert!(TaskSpec::decision_tree(20, 1, 0.0).validate().is_err());
    }
}
