//! Sweep specs, the append-only manifest, and the resumable runner.
//!
//! A sweep spec is a TOML file checked against the schema below
//! (unknown keys are rejected; `schema_version` must match). The manifest
//! records one entry per `(config × seed)` run with the path of its
//! RunRecord; rerunning a completed sweep is a no-op unless `--force`.
//! Run outputs are deterministic, so the final manifest and records are
//! byte-identical no matter how the sweep was interrupted, resumed, or
//! parallelized.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use icl_core::tasks::{TaskFamily, TaskSpec};
use icl_core::train::{train_run, RunRecord, TrainConfig};
use icl_core::transformer::ModelConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    pub task: TaskSection,
    pub grid: GridSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub family: TaskFamily,
    pub d_x: usize,
    #[serde(default)]
    pub noise_std: f64,
    /// Tree depth; required for decision trees.
    pub hierarchy_depth: Option<usize>,
    /// Nonzero count; required for sparse linear.
    pub sparsity: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub depth: Vec<usize>,
    pub width: Vec<usize>,
    pub steps: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub positional: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            heads: 4,
            ffn_multiplier: 4,
            positional: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub k_grid: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        // center of the hyperparameter grids
        TrainSection {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            dropout: 0.1,
            batch_size: 32,
            warmup_steps: 1000,
            k_grid: vec![1, 2, 5, 10, 20, 40],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_tasks: usize,
    pub n_queries: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_tasks: 1000,
            n_queries: 10,
        }
    }
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).context("parsing sweep spec")?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading sweep spec {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "sweep spec schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        let g = &self.grid;
        if g.depth.is_empty() || g.width.is_empty() || g.steps.is_empty() || g.seeds.is_empty() {
            bail!("every grid must be nonempty");
        }
        if self.train.k_grid.is_empty() {
            bail!("train.k_grid must be nonempty");
        }
        self.task_spec()?.validate().map_err(anyhow::Error::from)?;
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let t = &self.task;
        Ok(match t.family {
            TaskFamily::Linear => TaskSpec::linear(t.d_x, t.noise_std),
            TaskFamily::SparseLinear => {
                let s = t
                    .sparsity
                    .context("sparse_linear task needs `sparsity`")?;
                TaskSpec::sparse_linear(t.d_x, s, t.noise_std)
            }
            TaskFamily::DecisionTree => {
                let h = t
                    .hierarchy_depth
                    .context("decision_tree task needs `hierarchy_depth`")?;
                TaskSpec::decision_tree(t.d_x, h, t.noise_std)
            }
        })
    }

    /// All `(config × seed)` cells in canonical order.
    pub fn runs(&self) -> Result<Vec<PlannedRun>> {
        let task = self.task_spec()?;
        let k_max = *self.train.k_grid.iter().max().expect("nonempty");
        let mut out = Vec::new();
        for &depth in &self.grid.depth {
            for &width in &self.grid.width {
                for &steps in &self.grid.steps {
                    for &seed in &self.grid.seeds {
                        let id = format!("L{depth}_d{width}_s{steps}_seed{seed}");
                        let model = ModelConfig {
                            depth,
                            width,
                            heads: self.model.heads,
                            ffn_multiplier: self.model.ffn_multiplier,
                            max_context_pairs: k_max,
                            d_x: self.task.d_x,
                            d_y: 1,
                            positional: self.model.positional,
                            seed: 0, // train_run derives the init seed
                        };
                        let train = TrainConfig {
                            learning_rate: self.train.learning_rate,
                            weight_decay: self.train.weight_decay,
                            dropout: self.train.dropout,
                            batch_size: self.train.batch_size,
                            warmup_steps: self.train.warmup_steps.min(steps),
                            total_steps: steps,
                            floor_lr: 0.0,
                            seed,
                            k_grid: self.train.k_grid.clone(),
                            eval_tasks: self.eval.n_tasks,
                            eval_queries: self.eval.n_queries,
                        };
                        out.push(PlannedRun {
                            id,
                            model,
                            task: task.clone(),
                            train,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Hash of the canonical JSON form of the spec; ties a manifest to its
    /// spec.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(&canon);
        format!("sha256:{:x}", h.finalize())
    }
}

#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub id: String,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Done,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub status: RunStatus,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec_hash: String,
    pub runs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).context("parsing manifest")
    }

    fn store(&self, path: &Path) -> Result<()> {
        let mut sorted = self.clone();
        sorted.runs.sort_by(|a, b| a.id.cmp(&b.id));
        let body = serde_json::to_string_pretty(&sorted).expect("manifest serializes");
        write_atomic(path, body.as_bytes())
    }

    /// Every non-failed entry must exist and parse.
    pub fn load_records(&self, root: &Path) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        for entry in &self.runs {
            if entry.status == RunStatus::Failed {
                continue;
            }
            let path = root.join(&entry.path);
            let text = fs::read_to_string(&path)
                .with_context(|| format!("manifest names missing record {}", path.display()))?;
            let rec: RunRecord = serde_json::from_str(&text)
                .with_context(|| format!("parsing record {}", path.display()))?;
            out.push(rec);
        }
        Ok(out)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn record_is_valid(path: &Path) -> bool {
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunRecord>(&t).ok())
        .is_some()
}

/// Execute a sweep. Returns the final manifest. Completed runs whose
/// records exist and parse are skipped unless `force`.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, jobs: usize, force: bool) -> Result<Manifest> {
    spec.validate()?;
    let runs = spec.runs()?;
    eprintln!(
        "sweep: {} runs ({} depths × {} widths × {} step counts × {} seeds)",
        runs.len(),
        spec.grid.depth.len(),
        spec.grid.width.len(),
        spec.grid.steps.len(),
        spec.grid.seeds.len()
    );
    fs::create_dir_all(out_dir.join("runs"))?;
    let manifest_path = out_dir.join("manifest.json");
    let spec_hash = spec.hash();

    let mut done: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    if manifest_path.exists() && !force {
        let existing = Manifest::load(&manifest_path)?;
        if existing.spec_hash != spec_hash {
            bail!(
                "manifest at {} belongs to a different spec; pass --force or use a fresh --out",
                manifest_path.display()
            );
        }
        for entry in existing.runs {
            if entry.status != RunStatus::Failed && record_is_valid(&out_dir.join(&entry.path)) {
                done.insert(entry.id.clone(), entry);
            }
        }
    }

    let pending: Vec<&PlannedRun> = runs.iter().filter(|r| !done.contains_key(&r.id)).collect();
    eprintln!("sweep: {} cached, {} to run", done.len(), pending.len());

    let queue = Arc::new(Mutex::new(
        pending.iter().map(|r| (*r).clone()).collect::<Vec<_>>(),
    ));
    let (tx, rx) = mpsc::channel::<(ManifestEntry, f64)>();
    let workers = jobs.max(1).min(pending.len().max(1));
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let queue = Arc::clone(&queue);
            let tx = tx.clone();
            let out_dir = out_dir.to_path_buf();
            scope.spawn(move || {
                loop {
                    let next = queue.lock().expect("queue lock").pop();
                    let Some(run) = next else { break };
                    let started = std::time::Instant::now();
                    let rel = format!("runs/{}.json", run.id);
                    let entry = match execute_run(&run, &out_dir.join(&rel)) {
                        Ok(diverged) => ManifestEntry {
                            id: run.id.clone(),
                            status: if diverged { RunStatus::Diverged } else { RunStatus::Done },
                            path: rel,
                        },
                        Err(err) => {
                            eprintln!("run {} failed: {err:#}", run.id);
                            ManifestEntry {
                                id: run.id.clone(),
                                status: RunStatus::Failed,
                                path: rel,
                            }
                        }
                    };
                    if tx.send((entry, started.elapsed().as_secs_f64())).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);

        // single manifest writer; wall-clock goes to a sidecar log, never
        // into the deterministic artifacts
        let mut log = String::new();
        for (entry, secs) in rx {
            log.push_str(&format!("{} {:?} {:.1}s\n", entry.id, entry.status, secs));
            done.insert(entry.id.clone(), entry);
            let manifest = Manifest {
                schema_version: SCHEMA_VERSION,
                spec_hash: spec_hash.clone(),
                runs: done.values().cloned().collect(),
            };
            manifest.store(&manifest_path)?;
        }
        if !log.is_empty() {
            use std::io::Write;
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(out_dir.join("runs.log"))?;
            f.write_all(log.as_bytes())?;
        }
        Ok(())
    })?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        spec_hash,
        runs: done.values().cloned().collect(),
    };
    manifest.store(&manifest_path)?;
    Ok(manifest)
}

fn execute_run(run: &PlannedRun, record_path: &Path) -> Result<bool> {
    let (record, _model) = train_run(&run.model, &run.task, &run.train)
        .with_context(|| format!("training {}", run.id))?;
    if !record.all_finite() {
        bail!("run {} produced non-finite record values", run.id);
    }
    let body = serde_json::to_vec(&record).expect("record serializes");
    write_atomic(record_path, &body)?;
    Ok(record.diverged)
}
