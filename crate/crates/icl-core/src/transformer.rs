//! Decoder-style transformer over packed ICL prompts.
//!
//! Forward recipe (fixed; the manual-trace oracle in the tests mirrors it):
//!
//! 1. `h = tokens · W_in + b_in`, plus a learned absolute positional
//!    embedding per row when enabled.
//! 2. Per layer, pre-norm residual blocks:
//!    `h += W_O · MHA(LN₁(h))` then `h += FFN(LN₂(h))`, where MHA uses full
//!    (non-causal) attention over the whole prompt with per-head softmax
//!    temperature `√(d/heads)`, and FFN is `gelu(z·W₁ + b₁)·W₂ + b₂`.
//! 3. Final layer norm, then the readout head maps the last row's state to
//!    a `d_y` prediction.
//!
//! The episode is presented whole, so no causal mask: with positional
//! embeddings disabled the prediction is invariant under permutation of the
//! context pairs. Loss is computed on the query prediction only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("context capacity exceeded: k={k} > k_max={k_max}")]
    Capacity { k: usize, k_max: usize },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error in {layer}: {source}")]
    Forward { layer: String, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of residual blocks L. Zero is allowed: embedding + readout only.
    pub depth: usize,
    /// Residual width d.
    pub width: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    /// Largest number of context pairs a prompt may carry.
    pub max_context_pairs: usize,
    pub d_x: usize,
    pub d_y: usize,
    /// Learned absolute positional embeddings; disable for the
    /// permutation-invariance property.
    pub positional: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.width == 0 || self.d_x == 0 || self.d_y == 0 {
            return Err(ModelError::Config("zero dimension".into()));
        }
        if self.width < self.d_x + self.d_y {
            return Err(ModelError::Config(format!(
                "width {} cannot pack d_x + d_y = {}",
                self.width,
                self.d_x + self.d_y
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "heads {} must divide width {}",
                self.heads, self.width
            )));
        }
        if self.ffn_multiplier == 0 {
            return Err(ModelError::Config("ffn_multiplier must be positive".into()));
        }
        Ok(())
    }

    /// Rows a prompt with `k` context pairs occupies.
    pub fn prompt_rows(k: usize) -> usize {
        2 * k + 1
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

/// A model: config plus the full named weight set.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub w_in: Tensor,
    pub b_in: Tensor,
    /// `[2·k_max+1, d]`, present iff `config.positional`.
    pub pos: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

/// Exact count of trainable scalars for a config.
pub fn count_params(config: &ModelConfig) -> usize {
    let d = config.width;
    let m = config.ffn_multiplier * d;
    let embed = d * d + d + if config.positional { (2 * config.max_context_pairs + 1) * d } else { 0 };
    let per_layer = 2 * d      // ln1
        + 4 * d * d            // W_Q, W_K, W_V, W_O
        + 2 * d                // ln2
        + d * m + m            // W_ff1, b_ff1
        + m * d + d; // W_ff2, b_ff2
    let head = 2 * d + d * config.d_y + config.d_y; // final LN + readout
    embed + config.depth * per_layer + head
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

/// Initialize a model deterministically from `config.seed`.
///
/// Projections (`W_in`, `W_Q/K/V/O`, `W_ff1`, positional table) are i.i.d.
/// Gaussian with std `1/√d`; the FFN output `W_ff2` uses `1/√(d·ffn_mult)`.
/// Layer-norm gains start at one, biases at zero. The readout starts at
/// zero so an untrained model predicts exactly zero.
pub fn init_model(config: &ModelConfig) -> Result<TransformerModel, ModelError> {
    config.validate()?;
    let d = config.width;
    let m = config.ffn_multiplier * d;
    let proj_std = 1.0 / (d as f64).sqrt();
    let ffn_out_std = 1.0 / (m as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let w_in = gaussian(&mut rng, vec![d, d], proj_std);
    let b_in = Tensor::zeros(vec![d]);
    let pos = if config.positional {
        Some(gaussian(
            &mut rng,
            vec![2 * config.max_context_pairs + 1, d],
            proj_std,
        ))
    } else {
        None
    };
    let mut layers = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        layers.push(LayerWeights {
            ln1_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln1_bias: Tensor::zeros(vec![d]),
            w_q: gaussian(&mut rng, vec![d, d], proj_std),
            w_k: gaussian(&mut rng, vec![d, d], proj_std),
            w_v: gaussian(&mut rng, vec![d, d], proj_std),
            w_o: gaussian(&mut rng, vec![d, d], proj_std),
            ln2_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln2_bias: Tensor::zeros(vec![d]),
            w_ff1: gaussian(&mut rng, vec![d, m], proj_std),
            b_ff1: Tensor::zeros(vec![m]),
            w_ff2: gaussian(&mut rng, vec![m, d], ffn_out_std),
            b_ff2: Tensor::zeros(vec![d]),
        });
    }
    Ok(TransformerModel {
        config: config.clone(),
        w_in,
        b_in,
        pos,
        layers,
        ln_f_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        ln_f_bias: Tensor::zeros(vec![d]),
        w_out: Tensor::zeros(vec![d, config.d_y]),
        b_out: Tensor::zeros(vec![config.d_y]),
    })
}

impl TransformerModel {
    /// Visit every trainable tensor in canonical order.
    pub fn for_each_param(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("w_in", &self.w_in);
        f("b_in", &self.b_in);
        if let Some(p) = &self.pos {
            f("pos", p);
        }
        for (i, l) in self.layers.iter().enumerate() {
            let names = [
                "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias",
                "w_ff1", "b_ff1", "w_ff2", "b_ff2",
            ];
            let tensors = [
                &l.ln1_gain, &l.ln1_bias, &l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.ln2_gain,
                &l.ln2_bias, &l.w_ff1, &l.b_ff1, &l.w_ff2, &l.b_ff2,
            ];
            for (n, t) in names.iter().zip(tensors) {
                f(&format!("layer{i}.{n}"), t);
            }
        }
        f("ln_f_gain", &self.ln_f_gain);
        f("ln_f_bias", &self.ln_f_bias);
        f("w_out", &self.w_out);
        f("b_out", &self.b_out);
    }

    /// Same order as [`Self::for_each_param`], mutable.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("w_in", &mut self.w_in);
        f("b_in", &mut self.b_in);
        if let Some(p) = &mut self.pos {
            f("pos", p);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.ln1_gain"), &mut l.ln1_gain);
            f(&format!("layer{i}.ln1_bias"), &mut l.ln1_bias);
            f(&format!("layer{i}.w_q"), &mut l.w_q);
            f(&format!("layer{i}.w_k"), &mut l.w_k);
            f(&format!("layer{i}.w_v"), &mut l.w_v);
            f(&format!("layer{i}.w_o"), &mut l.w_o);
            f(&format!("layer{i}.ln2_gain"), &mut l.ln2_gain);
            f(&format!("layer{i}.ln2_bias"), &mut l.ln2_bias);
            f(&format!("layer{i}.w_ff1"), &mut l.w_ff1);
            f(&format!("layer{i}.b_ff1"), &mut l.b_ff1);
            f(&format!("layer{i}.w_ff2"), &mut l.w_ff2);
            f(&format!("layer{i}.b_ff2"), &mut l.b_ff2);
        }
        f("ln_f_gain", &mut self.ln_f_gain);
        f("ln_f_bias", &mut self.ln_f_bias);
        f("w_out", &mut self.w_out);
        f("b_out", &mut self.b_out);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    /// Checkpoint: JSON config header plus named tensors in the flat
    /// little-endian format.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"ICLT")?;
        w.write_all(&1u32.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        let mut names = Vec::new();
        self.for_each_param(|n, _| names.push(n.to_string()));
        w.write_all(&(names.len() as u64).to_le_bytes())?;
        let mut result = Ok(());
        self.for_each_param(|name, t| {
            if result.is_err() {
                return;
            }
            result = (|| -> Result<(), ModelError> {
                w.write_all(&(name.len() as u64).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                t.write_to(&mut w)?;
                Ok(())
            })();
        });
        result
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"ICLT" {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(ModelError::Checkpoint("unsupported version".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let cfg_len = u64::from_le_bytes(b8) as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
        let mut model = init_model(&config)?;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            let name_len = u64::from_le_bytes(b8) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| ModelError::Checkpoint("bad tensor name".into()))?;
            tensors.insert(name, Tensor::read_from(&mut r)?);
        }
        let mut missing = Vec::new();
        model.for_each_param_mut(|name, t| match tensors.remove(name) {
            Some(loaded) if loaded.shape == t.shape => *t = loaded,
            Some(loaded) => missing.push(format!("{name}: shape {:?} vs {:?}", loaded.shape, t.shape)),
            None => missing.push(format!("{name}: absent")),
        });
        if !missing.is_empty() {
            return Err(ModelError::Checkpoint(missing.join("; ")));
        }
        Ok(model)
    }
}

/// A packed prompt: `(2k+1) × d`. Rows `2i` hold `x_i` in slots `[0, d_x)`,
/// rows `2i+1` hold `y_i` in slots `[d_x, d_x+d_y)`, the final row holds the
/// query with a zeroed y-slot. Positional embeddings are added inside the
/// forward pass, not here, so slots can be decoded back exactly.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub tokens: Tensor,
    pub k: usize,
}

pub fn encode_context(
    config: &ModelConfig,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    query: &[f64],
) -> Result<Prompt, ModelError> {
    let k = xs.len();
    if ys.len() != k {
        return Err(ModelError::Dimension(format!(
            "xs has {k} entries, ys has {}",
            ys.len()
        )));
    }
    if k > config.max_context_pairs {
        return Err(ModelError::Capacity {
            k,
            k_max: config.max_context_pairs,
        });
    }
    let (d, d_x, d_y) = (config.width, config.d_x, config.d_y);
    if query.len() != d_x {
        return Err(ModelError::Dimension(format!(
            "query has {} dims, expected {d_x}",
            query.len()
        )));
    }
    let rows = ModelConfig::prompt_rows(k);
    let mut data = vec![0.0; rows * d];
    for i in 0..k {
        if xs[i].len() != d_x || ys[i].len() != d_y {
            return Err(ModelError::Dimension(format!(
                "pair {i} has dims ({}, {}), expected ({d_x}, {d_y})",
                xs[i].len(),
                ys[i].len()
            )));
        }
        data[2 * i * d..2 * i * d + d_x].copy_from_slice(&xs[i]);
        data[(2 * i + 1) * d + d_x..(2 * i + 1) * d + d_x + d_y].copy_from_slice(&ys[i]);
    }
    data[(rows - 1) * d..(rows - 1) * d + d_x].copy_from_slice(query);
    Ok(Prompt {
        tokens: Tensor::new(vec![rows, d], data)?,
        k,
    })
}

/// Inverse of [`encode_context`]: reads the packed slots back out.
pub fn decode_prompt(
    config: &ModelConfig,
    prompt: &Prompt,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let (d, d_x, d_y) = (config.width, config.d_x, config.d_y);
    let t = &prompt.tokens;
    let mut xs = Vec::with_capacity(prompt.k);
    let mut ys = Vec::with_capacity(prompt.k);
    for i in 0..prompt.k {
        xs.push(t.data[2 * i * d..2 * i * d + d_x].to_vec());
        ys.push(t.data[(2 * i + 1) * d + d_x..(2 * i + 1) * d + d_x + d_y].to_vec());
    }
    let last = (t.rows() - 1) * d;
    let query = t.data[last..last + d_x].to_vec();
    (xs, ys, query)
}

/// Model weights staged onto a tape.
pub struct ModelVars {
    pub w_in: Var,
    pub b_in: Var,
    pub pos: Option<Var>,
    pub layers: Vec<LayerVars>,
    pub ln_f_gain: Var,
    pub ln_f_bias: Var,
    pub w_out: Var,
    pub b_out: Var,
}

pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
}

/// Record the model's weights on a tape. `trainable` marks them for
/// gradient accumulation.
pub fn stage_params(tape: &mut Tape, model: &TransformerModel, trainable: bool) -> ModelVars {
    let mut stage = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    ModelVars {
        w_in: stage(&model.w_in),
        b_in: stage(&model.b_in),
        pos: model.pos.as_ref().map(&mut stage),
        layers: model
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_gain: stage(&l.ln1_gain),
                ln1_bias: stage(&l.ln1_bias),
                w_q: stage(&l.w_q),
                w_k: stage(&l.w_k),
                w_v: stage(&l.w_v),
                w_o: stage(&l.w_o),
                ln2_gain: stage(&l.ln2_gain),
                ln2_bias: stage(&l.ln2_bias),
                w_ff1: stage(&l.w_ff1),
                b_ff1: stage(&l.b_ff1),
                w_ff2: stage(&l.w_ff2),
                b_ff2: stage(&l.b_ff2),
            })
            .collect(),
        ln_f_gain: stage(&model.ln_f_gain),
        ln_f_bias: stage(&model.ln_f_bias),
        w_out: stage(&model.w_out),
        b_out: stage(&model.b_out),
    }
}

/// Dropout configuration for a training step; evaluation passes `None`.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// Run the forward pass for a batch of prompts on one tape.
///
/// All prompt rows are packed into a single row matrix so the width-d
/// matmuls run over the whole batch at once; attention stays per-episode.
/// Returns the `[batch, d_y]` prediction matrix.
pub fn forward_batch(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    prompts: &[Prompt],
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var, ModelError> {
    let d = config.width;
    let dh = d / config.heads;
    let temp = (dh as f64).sqrt();
    let ctx = |layer: String| move |source: TensorError| ModelError::Forward { layer, source };

    // offsets of each episode's rows in the packed matrix
    let mut offsets = Vec::with_capacity(prompts.len());
    let mut total_rows = 0;
    for p in prompts {
        if p.tokens.cols() != d {
            return Err(ModelError::Dimension(format!(
                "prompt row width {} does not match model width {d}",
                p.tokens.cols()
            )));
        }
        offsets.push((total_rows, p.tokens.rows()));
        total_rows += p.tokens.rows();
    }

    let token_vars: Vec<Var> = prompts
        .iter()
        .map(|p| tape.constant(p.tokens.clone()))
        .collect();
    let tokens = tape.concat(&token_vars, 0).map_err(ctx("embed".into()))?;
    let mut h = tape.matmul(tokens, vars.w_in).map_err(ctx("embed".into()))?;
    h = tape.add_row(h, vars.b_in).map_err(ctx("embed".into()))?;
    if let Some(pos) = vars.pos {
        let pos_rows = tape.value(pos).rows();
        let mut parts = Vec::with_capacity(prompts.len());
        for &(_, rows) in &offsets {
            if rows > pos_rows {
                return Err(ModelError::Dimension(format!(
                    "prompt has {rows} rows but positional table has {pos_rows}"
                )));
            }
            parts.push(tape.slice(pos, 0, 0, rows).map_err(ctx("positional".into()))?);
        }
        let pos_all = tape.concat(&parts, 0).map_err(ctx("positional".into()))?;
        h = tape.add(h, pos_all).map_err(ctx("positional".into()))?;
    }

    for (li, layer) in vars.layers.iter().enumerate() {
        let name = |part: &str| format!("layer{li}.{part}");
        // ── attention block ──
        let u = tape
            .layer_norm(h, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)
            .map_err(ctx(name("ln1")))?;
        let q = tape.matmul(u, layer.w_q).map_err(ctx(name("attn")))?;
        let k = tape.matmul(u, layer.w_k).map_err(ctx(name("attn")))?;
        let v = tape.matmul(u, layer.w_v).map_err(ctx(name("attn")))?;
        let attn_all = tape
            .block_attention(q, k, v, &offsets, config.heads, temp)
            .map_err(ctx(name("attn")))?;
        let mut attn = tape.matmul(attn_all, layer.w_o).map_err(ctx(name("attn")))?;
        if let Some(dk) = dropout.as_mut() {
            attn = apply_dropout(tape, attn, dk).map_err(ctx(name("attn-dropout")))?;
        }
        h = tape.add(h, attn).map_err(ctx(name("residual1")))?;

        // ── feed-forward block ──
        let z = tape
            .layer_norm(h, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)
            .map_err(ctx(name("ln2")))?;
        let f1 = tape.matmul(z, layer.w_ff1).map_err(ctx(name("ffn")))?;
        let f1 = tape.add_row(f1, layer.b_ff1).map_err(ctx(name("ffn")))?;
        let g = tape.gelu(f1).map_err(ctx(name("ffn")))?;
        let f2 = tape.matmul(g, layer.w_ff2).map_err(ctx(name("ffn")))?;
        let mut f2 = tape.add_row(f2, layer.b_ff2).map_err(ctx(name("ffn")))?;
        if let Some(dk) = dropout.as_mut() {
            f2 = apply_dropout(tape, f2, dk).map_err(ctx(name("ffn-dropout")))?;
        }
        h = tape.add(h, f2).map_err(ctx(name("residual2")))?;
    }

    let hf = tape
        .layer_norm(h, vars.ln_f_gain, vars.ln_f_bias, LAYER_NORM_EPS)
        .map_err(ctx("ln_f".into()))?;
    // readout on each episode's final row
    let mut finals = Vec::with_capacity(prompts.len());
    for &(start, rows) in &offsets {
        finals.push(tape.slice(hf, 0, start + rows - 1, 1).map_err(ctx("readout".into()))?);
    }
    let states = tape.concat(&finals, 0).map_err(ctx("readout".into()))?;
    let out = tape.matmul(states, vars.w_out).map_err(ctx("readout".into()))?;
    let out = tape.add_row(out, vars.b_out).map_err(ctx("readout".into()))?;
    Ok(out)
}

fn apply_dropout(tape: &mut Tape, x: Var, d: &mut Dropout<'_>) -> Result<Var, TensorError> {
    use rand::Rng;
    if d.p == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape.clone();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - d.p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if d.rng.gen::<f64>() < d.p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// Forward pass for a single prompt on a frozen model; pure function of
/// `(model, prompt)`.
pub fn forward(model: &TransformerModel, prompt: &Prompt) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let vars = stage_params(&mut tape, model, false);
    let out = forward_batch(&mut tape, &vars, &model.config, std::slice::from_ref(prompt), None)?;
    Ok(tape.value(out).data.clone())
}
