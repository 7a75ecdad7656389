//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order; each node holds
//! the produced tensor plus a backward rule referencing its input nodes.
//! Construction order is topological by definition, so [`Tape::backward`]
//! replays the records strictly in reverse, accumulating gradients into
//! every `requires_grad` tensor reachable from the loss.
//!
//! A tape (and every `Var` it hands out) is confined to one run; it is not
//! shared across concurrent runs.

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, transpose2d, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// gelu in the tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
/// The finite-difference oracle in the tests checks exactly this formula.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}


enum Rule {
    Leaf,
    Add {
        a: usize,
        b: usize,
    },
    /// `[m,n] + [n]`, the row vector broadcast over every row.
    AddRow {
        a: usize,
        row: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Gelu {
        a: usize,
        /// tanh of the inner cubic, cached for the backward pass
        tanh_u: Vec<f64>,
    },
    Softmax {
        a: usize,
        axis: usize,
        temperature: f64,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        /// cached per-row mean and 1/std from the forward pass
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Multi-head attention over independent row blocks, fused into one
    /// node: per block and head, `softmax(q·kᵀ/τ)·v` written back to the
    /// block's rows. Keeps the tape small when a batch holds many episodes.
    BlockAttention {
        q: usize,
        k: usize,
        v: usize,
        blocks: Vec<(usize, usize)>,
        heads: usize,
        temperature: f64,
        /// attention probabilities cached forward, blocks outer, heads inner
        probs: Vec<f64>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Mean {
        a: usize,
    },
    Sum {
        a: usize,
    },
    MseLoss {
        pred: usize,
        target: usize,
    },
}

struct Node {
    value: Tensor,
    rule: Rule,
}

/// Wengert list of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            rule: Rule::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a trainable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    /// Record a non-trainable input.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, op: &'static str, value: Tensor, rule: Rule) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node { value, rule });
        Ok(Var(self.nodes.len() - 1))
    }

    /// For ops that only rearrange already-checked data (slice, concat,
    /// transpose): copies cannot introduce non-finite values.
    fn push_copy(&mut self, value: Tensor, rule: Rule) -> Var {
        self.nodes.push(Node { value, rule });
        Var(self.nodes.len() - 1)
    }

    // ── Forward operations ──────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let mut out = Tensor::new(ta.shape.clone(), data)?;
        out.requires_grad = ta.requires_grad || tb.requires_grad;
        self.push("add", out, Rule::Add { a: a.0, b: b.0 })
    }

    /// `[m,n] + [n]`: add a row vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let n = ta.cols();
        if tr.shape != vec![n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: ta.shape.clone(),
                right: tr.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(n) {
            for (c, r) in chunk.iter_mut().zip(&tr.data) {
                *c += r;
            }
        }
        let mut out = Tensor::new(ta.shape.clone(), data)?;
        out.requires_grad = ta.requires_grad || tr.requires_grad;
        self.push("add_row", out, Rule::AddRow { a: a.0, row: row.0 })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let mut out = Tensor::new(ta.shape.clone(), data)?;
        out.requires_grad = ta.requires_grad || tb.requires_grad;
        self.push("mul", out, Rule::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data.iter().map(|x| x * factor).collect();
        let mut out = Tensor::new(ta.shape.clone(), data)?;
        out.requires_grad = ta.requires_grad;
        self.push("scale", out, Rule::Scale { a: a.0, factor })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = matmul_nn(&ta.data, &tb.data, m, k, n);
        let mut out = Tensor::new(vec![m, n], data)?;
        out.requires_grad = ta.requires_grad || tb.requires_grad;
        self.push("matmul", out, Rule::Matmul { a: a.0, b: b.0 })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 2 {
            return Err(TensorError::Contract(format!(
                "transpose expects a matrix, got shape {:?}",
                ta.shape
            )));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let data = transpose2d(&ta.data, m, n);
        let mut out = Tensor::new(vec![n, m], data)?;
        out.requires_grad = ta.requires_grad;
        Ok(self.push_copy(out, Rule::Transpose { a: a.0 }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let mut out = Tensor::new(ta.shape.clone(), data)?;
        out.requires_grad = ta.requires_grad;
        self.push("relu", out, Rule::Relu { a: a.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let mut tanh_u = Vec::with_capacity(ta.numel());
        let data: Vec<f64> = ta
            .data
            .iter()
            .map(|&x| {
                let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
                tanh_u.push(t);
                0.5 * x * (1.0 + t)
            })
            .collect();
        let mut out = Tensor::new(ta.shape.clone(), data)?;
        out.requires_grad = ta.requires_grad;
        self.push("gelu", out, Rule::Gelu { a: a.0, tanh_u })
    }

    /// Softmax along `axis` with a positive temperature:
    /// `exp((x − max)/temperature)` normalized along the axis.
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if !(temperature > 0.0) {
            return Err(TensorError::Contract(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        if axis >= ta.shape.len() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                ta.shape
            )));
        }
        if !ta.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax-input" });
        }
        let data = match ta.shape.len() {
            1 => softmax_rows(&ta.data, 1, ta.shape[0], temperature),
            2 => {
                let (m, n) = (ta.shape[0], ta.shape[1]);
                if axis == 1 {
                    softmax_rows(&ta.data, m, n, temperature)
                } else {
                    let t = transpose2d(&ta.data, m, n);
                    let s = softmax_rows(&t, n, m, temperature);
                    transpose2d(&s, n, m)
                }
            }
            r => {
                return Err(TensorError::Contract(format!(
                    "softmax supports rank 1 or 2, got rank {r}"
                )))
            }
        };
        let mut out = Tensor::new(ta.shape.clone(), data)?;
        out.requires_grad = ta.requires_grad;
        self.push(
            "softmax",
            out,
            Rule::Softmax {
                a: a.0,
                axis,
                temperature,
            },
        )
    }

    /// Layer normalization over the trailing dimension, then `gain ∘ x̂ + bias`.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gain: Var,
        bias: Var,
        epsilon: f64,
    ) -> Result<Var, TensorError> {
        let (ta, tg, tb) = (
            &self.nodes[a.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let n = ta.cols();
        if tg.shape != vec![n] || tb.shape != vec![n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: ta.shape.clone(),
                right: tg.shape.clone(),
            });
        }
        let rows = ta.numel() / n;
        let mut data = vec![0.0; ta.numel()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &ta.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + epsilon).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            let out_row = &mut data[r * n..(r + 1) * n];
            for j in 0..n {
                out_row[j] = (row[j] - mean) * inv_std * tg.data[j] + tb.data[j];
            }
        }
        let mut out = Tensor::new(ta.shape.clone(), data)?;
        out.requires_grad = ta.requires_grad || tg.requires_grad || tb.requires_grad;
        self.push(
            "layer_norm",
            out,
            Rule::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    /// Fused multi-head attention over independent row blocks.
    ///
    /// `q`, `k`, `v` are `[rows, d]` with `heads · head_dim = d`; each
    /// `(start, len)` block attends only within itself. Equivalent to the
    /// slice/softmax/matmul composition (see the equivalence test), one
    /// node instead of ~10 per block and head.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: &[(usize, usize)],
        heads: usize,
        temperature: f64,
    ) -> Result<Var, TensorError> {
        let (tq, tk, tv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        if tq.shape != tk.shape || tq.shape != tv.shape || tq.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "block_attention",
                left: tq.shape.clone(),
                right: tk.shape.clone(),
            });
        }
        let (rows, d) = (tq.shape[0], tq.shape[1]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "heads {heads} must divide width {d}"
            )));
        }
        if !(temperature > 0.0) {
            return Err(TensorError::Contract(format!(
                "attention temperature must be positive, got {temperature}"
            )));
        }
        for &(start, len) in blocks {
            if len == 0 || start + len > rows {
                return Err(TensorError::Contract(format!(
                    "block [{start}, {start}+{len}) outside {rows} rows"
                )));
            }
        }
        let dh = d / heads;
        let mut out = vec![0.0; rows * d];
        let mut probs_cache = Vec::new();
        for &(start, len) in blocks {
            for h in 0..heads {
                let col = h * dh;
                let qh = gather_block(&tq.data, d, start, len, col, dh);
                let kh = gather_block(&tk.data, d, start, len, col, dh);
                let vh = gather_block(&tv.data, d, start, len, col, dh);
                let kt = transpose2d(&kh, len, dh);
                let scores = matmul_nn(&qh, &kt, len, dh, len);
                let probs = softmax_rows(&scores, len, len, temperature);
                let ctx = matmul_nn(&probs, &vh, len, len, dh);
                scatter_block(&mut out, d, start, len, col, dh, &ctx);
                probs_cache.extend_from_slice(&probs);
            }
        }
        let mut t = Tensor::new(vec![rows, d], out)?;
        t.requires_grad = tq.requires_grad || tk.requires_grad || tv.requires_grad;
        self.push(
            "block_attention",
            t,
            Rule::BlockAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                blocks: blocks.to_vec(),
                heads,
                temperature,
                probs: probs_cache,
            },
        )
    }

    /// Concatenate matrices along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(TensorError::Contract(format!("concat axis {axis} invalid")));
        }
        let first = &self.nodes[parts[0].0].value;
        let (m0, n0) = (first.rows(), first.cols());
        let mut requires = false;
        for p in parts {
            let t = &self.nodes[p.0].value;
            requires |= t.requires_grad;
            let same = if axis == 0 { t.cols() == n0 } else { t.rows() == m0 };
            if !same || t.shape.len() != first.shape.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
        }
        let out = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &self.nodes[p.0].value;
                rows += t.rows();
                data.extend_from_slice(&t.data);
            }
            Tensor::new(vec![rows, n0], data)?
        } else {
            let total_cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
            let mut data = vec![0.0; m0 * total_cols];
            let mut col = 0;
            for p in parts {
                let t = &self.nodes[p.0].value;
                let c = t.cols();
                for r in 0..m0 {
                    data[r * total_cols + col..r * total_cols + col + c]
                        .copy_from_slice(&t.data[r * c..(r + 1) * c]);
                }
                col += c;
            }
            Tensor::new(vec![m0, total_cols], data)?
        };
        let mut out = out;
        out.requires_grad = requires;
        Ok(self.push_copy(
            out,
            Rule::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    /// Copy a contiguous range along `axis` (0 = rows, 1 = columns).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || start + len > bound || len == 0 {
            return Err(TensorError::Contract(format!(
                "slice [{start}, {start}+{len}) on axis {axis} invalid for shape {:?}",
                ta.shape
            )));
        }
        let out = if axis == 0 {
            Tensor::new(vec![len, n], ta.data[start * n..(start + len) * n].to_vec())?
        } else {
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&ta.data[r * n + start..r * n + start + len]);
            }
            Tensor::new(vec![m, len], data)?
        };
        let mut out = out;
        out.requires_grad = ta.requires_grad;
        Ok(self.push_copy(
            out,
            Rule::Slice {
                a: a.0,
                axis,
                start,
            },
        ))
    }

    /// Mean over all elements; returns a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let v = ta.data.iter().sum::<f64>() / ta.numel() as f64;
        let mut out = Tensor::scalar(v);
        out.requires_grad = ta.requires_grad;
        self.push("mean", out, Rule::Mean { a: a.0 })
    }

    /// Sum over all elements; returns a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let v = ta.data.iter().sum::<f64>();
        let mut out = Tensor::scalar(v);
        out.requires_grad = ta.requires_grad;
        self.push("sum", out, Rule::Sum { a: a.0 })
    }

    /// Mean squared error between two same-shape tensors; returns a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (tp, tt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if tp.shape != tt.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                left: tp.shape.clone(),
                right: tt.shape.clone(),
            });
        }
        let n = tp.numel() as f64;
        let v = tp
            .data
            .iter()
            .zip(&tt.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let mut out = Tensor::scalar(v);
        out.requires_grad = tp.requires_grad || tt.requires_grad;
        self.push(
            "mse_loss",
            out,
            Rule::MseLoss {
                pred: pred.0,
                target: target.0,
            },
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate `grad` on every `requires_grad` tensor reachable from
    /// `loss`, which must be a scalar recorded on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.value.grad.as_ref() else {
                continue;
            };
            // contributions computed read-only first, then accumulated
            let contributions = propagate(node, g, before);
            for (idx, contrib) in contributions {
                let slot = &mut before[idx].value;
                match &mut slot.grad {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    None => slot.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

/// Copy the `[len, dh]` sub-block at `(start, col)` out of a `[_, d]` matrix.
fn gather_block(data: &[f64], d: usize, start: usize, len: usize, col: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * dh);
    for r in start..start + len {
        out.extend_from_slice(&data[r * d + col..r * d + col + dh]);
    }
    out
}

fn scatter_block(
    data: &mut [f64],
    d: usize,
    start: usize,
    len: usize,
    col: usize,
    dh: usize,
    block: &[f64],
) {
    for r in 0..len {
        data[(start + r) * d + col..(start + r) * d + col + dh]
            .copy_from_slice(&block[r * dh..(r + 1) * dh]);
    }
}

fn scatter_add_block(
    data: &mut [f64],
    d: usize,
    start: usize,
    len: usize,
    col: usize,
    dh: usize,
    block: &[f64],
) {
    for r in 0..len {
        let dst = &mut data[(start + r) * d + col..(start + r) * d + col + dh];
        for (a, b) in dst.iter_mut().zip(&block[r * dh..(r + 1) * dh]) {
            *a += b;
        }
    }
}

fn softmax_rows(data: &[f64], rows: usize, n: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let row = &data[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * n..(r + 1) * n];
        let mut sum = 0.0;
        for j in 0..n {
            let e = ((row[j] - max) / temperature).exp();
            o[j] = e;
            sum += e;
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Compute the gradient contributions of one node to its inputs.
/// Inputs that do not require grad are skipped.
fn propagate(node: &Node, g: &[f64], before: &[Node]) -> Vec<(usize, Vec<f64>)> {
    let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
    let needs = |idx: usize| before[idx].value.requires_grad;
    match &node.rule {
        Rule::Leaf => {}
        Rule::Add { a, b } => {
            if needs(*a) {
                out.push((*a, g.to_vec()));
            }
            if needs(*b) {
                out.push((*b, g.to_vec()));
            }
        }
        Rule::AddRow { a, row } => {
            if needs(*a) {
                out.push((*a, g.to_vec()));
            }
            if needs(*row) {
                let n = before[*row].value.numel();
                let mut acc = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (a, c) in acc.iter_mut().zip(chunk) {
                        *a += c;
                    }
                }
                out.push((*row, acc));
            }
        }
        Rule::Mul { a, b } => {
            if needs(*a) {
                let vb = &before[*b].value.data;
                out.push((*a, g.iter().zip(vb).map(|(g, b)| g * b).collect()));
            }
            if needs(*b) {
                let va = &before[*a].value.data;
                out.push((*b, g.iter().zip(va).map(|(g, a)| g * a).collect()));
            }
        }
        Rule::Scale { a, factor } => {
            if needs(*a) {
                out.push((*a, g.iter().map(|g| g * factor).collect()));
            }
        }
        Rule::Matmul { a, b } => {
            let (ta, tb) = (&before[*a].value, &before[*b].value);
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            if needs(*a) {
                // dA = dC · Bᵀ
                out.push((*a, matmul_nt(g, &tb.data, m, n, k)));
            }
            if needs(*b) {
                // dB = Aᵀ · dC
                out.push((*b, matmul_tn(&ta.data, g, m, k, n)));
            }
        }
        Rule::Transpose { a } => {
            if needs(*a) {
                let t = &node.value;
                // node value is [n,m]; gradient flows back transposed
                out.push((*a, transpose2d(g, t.shape[0], t.shape[1])));
            }
        }
        Rule::Relu { a } => {
            if needs(*a) {
                let va = &before[*a].value.data;
                out.push((
                    *a,
                    g.iter()
                        .zip(va)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
        }
        Rule::Gelu { a, tanh_u } => {
            if needs(*a) {
                let va = &before[*a].value.data;
                out.push((
                    *a,
                    g.iter()
                        .zip(va)
                        .zip(tanh_u)
                        .map(|((g, &x), &t)| {
                            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect(),
                ));
            }
        }
        Rule::Softmax {
            a,
            axis,
            temperature,
        } => {
            if needs(*a) {
                let y = &node.value;
                let da = match y.shape.len() {
                    1 => softmax_backward_rows(g, &y.data, 1, y.shape[0], *temperature),
                    _ => {
                        let (m, n) = (y.shape[0], y.shape[1]);
                        if *axis == 1 {
                            softmax_backward_rows(g, &y.data, m, n, *temperature)
                        } else {
                            let gt = transpose2d(g, m, n);
                            let yt = transpose2d(&y.data, m, n);
                            let dt = softmax_backward_rows(&gt, &yt, n, m, *temperature);
                            transpose2d(&dt, n, m)
                        }
                    }
                };
                out.push((*a, da));
            }
        }
        Rule::LayerNorm {
            a,
            gain,
            bias,
            mean,
            inv_std,
        } => {
            let ta = &before[*a].value;
            let tg = &before[*gain].value;
            let n = ta.cols();
            let rows = ta.numel() / n;
            let mut da = if needs(*a) { Some(vec![0.0; ta.numel()]) } else { None };
            let mut dg = if needs(*gain) { Some(vec![0.0; n]) } else { None };
            let mut db = if needs(*bias) { Some(vec![0.0; n]) } else { None };
            for r in 0..rows {
                let x = &ta.data[r * n..(r + 1) * n];
                let grow = &g[r * n..(r + 1) * n];
                let (mu, is) = (mean[r], inv_std[r]);
                if let Some(db) = db.as_mut() {
                    for j in 0..n {
                        db[j] += grow[j];
                    }
                }
                if let Some(dg) = dg.as_mut() {
                    for j in 0..n {
                        dg[j] += grow[j] * (x[j] - mu) * is;
                    }
                }
                if let Some(da) = da.as_mut() {
                    // dx = inv_std · (gg − mean(gg) − x̂ · mean(gg ∘ x̂))
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..n {
                        let gg = grow[j] * tg.data[j];
                        let xh = (x[j] - mu) * is;
                        mean_gg += gg;
                        mean_ggx += gg * xh;
                    }
                    mean_gg /= n as f64;
                    mean_ggx /= n as f64;
                    let darow = &mut da[r * n..(r + 1) * n];
                    for j in 0..n {
                        let gg = grow[j] * tg.data[j];
                        let xh = (x[j] - mu) * is;
                        darow[j] += is * (gg - mean_gg - xh * mean_ggx);
                    }
                }
            }
            if let Some(d) = da {
                out.push((*a, d));
            }
            if let Some(d) = dg {
                out.push((*gain, d));
            }
            if let Some(d) = db {
                out.push((*bias, d));
            }
        }
        Rule::BlockAttention {
            q,
            k,
            v,
            blocks,
            heads,
            temperature,
            probs,
        } => {
            let (tq, tk, tv) = (&before[*q].value, &before[*k].value, &before[*v].value);
            let d = tq.shape[1];
            let dh = d / heads;
            let (nq, nk, nv) = (needs(*q), needs(*k), needs(*v));
            let mut dq = if nq { Some(vec![0.0; tq.numel()]) } else { None };
            let mut dk = if nk { Some(vec![0.0; tk.numel()]) } else { None };
            let mut dv = if nv { Some(vec![0.0; tv.numel()]) } else { None };
            let mut probs_off = 0;
            for &(start, len) in blocks {
                for h in 0..*heads {
                    let col = h * dh;
                    let p = &probs[probs_off..probs_off + len * len];
                    probs_off += len * len;
                    let dout = gather_block(g, d, start, len, col, dh);
                    if let Some(dv) = dv.as_mut() {
                        // dV = Pᵀ · dOut
                        let dvh = matmul_tn(p, &dout, len, len, dh);
                        scatter_add_block(dv, d, start, len, col, dh, &dvh);
                    }
                    if nq || nk {
                        let vh = gather_block(&tv.data, d, start, len, col, dh);
                        // dP = dOut · Vᵀ, then back through the softmax
                        let dp = matmul_nt(&dout, &vh, len, dh, len);
                        let ds = softmax_backward_rows(&dp, p, len, len, *temperature);
                        if let Some(dq) = dq.as_mut() {
                            let kh = gather_block(&tk.data, d, start, len, col, dh);
                            let dqh = matmul_nn(&ds, &kh, len, len, dh);
                            scatter_add_block(dq, d, start, len, col, dh, &dqh);
                        }
                        if let Some(dk) = dk.as_mut() {
                            let qh = gather_block(&tq.data, d, start, len, col, dh);
                            let dkh = matmul_tn(&ds, &qh, len, len, dh);
                            scatter_add_block(dk, d, start, len, col, dh, &dkh);
                        }
                    }
                }
            }
            if let Some(dq) = dq {
                out.push((*q, dq));
            }
            if let Some(dk) = dk {
                out.push((*k, dk));
            }
            if let Some(dv) = dv {
                out.push((*v, dv));
            }
        }
        Rule::Concat { parts, axis } => {
            if *axis == 0 {
                let mut row_off = 0;
                for p in parts {
                    let t = &before[*p].value;
                    let sz = t.numel();
                    if needs(*p) {
                        out.push((*p, g[row_off..row_off + sz].to_vec()));
                    }
                    row_off += sz;
                }
            } else {
                let total_cols: usize = parts.iter().map(|p| before[*p].value.cols()).sum();
                let m = node.value.rows();
                let mut col = 0;
                for p in parts {
                    let c = before[*p].value.cols();
                    if needs(*p) {
                        let mut d = vec![0.0; m * c];
                        for r in 0..m {
                            d[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total_cols + col..r * total_cols + col + c]);
                        }
                        out.push((*p, d));
                    }
                    col += c;
                }
            }
        }
        Rule::Slice { a, axis, start } => {
            if needs(*a) {
                let ta = &before[*a].value;
                let (m, n) = (ta.rows(), ta.cols());
                let mut d = vec![0.0; ta.numel()];
                if *axis == 0 {
                    let len = node.value.rows();
                    d[start * n..(start + len) * n].copy_from_slice(g);
                } else {
                    let len = node.value.cols();
                    for r in 0..m {
                        d[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                }
                out.push((*a, d));
            }
        }
        Rule::Mean { a } => {
            if needs(*a) {
                let n = before[*a].value.numel();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
        }
        Rule::Sum { a } => {
            if needs(*a) {
                let n = before[*a].value.numel();
                out.push((*a, vec![g[0]; n]));
            }
        }
        Rule::MseLoss { pred, target } => {
            let (tp, tt) = (&before[*pred].value, &before[*target].value);
            let n = tp.numel() as f64;
            let s = 2.0 * g[0] / n;
            if needs(*pred) {
                out.push((
                    *pred,
                    tp.data.iter().zip(&tt.data).map(|(p, t)| s * (p - t)).collect(),
                ));
            }
            if needs(*target) {
                out.push((
                    *target,
                    tp.data.iter().zip(&tt.data).map(|(p, t)| -s * (p - t)).collect(),
                ));
            }
        }
    }
    out
}

fn softmax_backward_rows(g: &[f64], y: &[f64], rows: usize, n: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let yr = &y[r * n..(r + 1) * n];
        let gr = &g[r * n..(r + 1) * n];
        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
        let o = &mut out[r * n..(r + 1) * n];
        for j in 0..n {
            o[j] = yr[j] * (gr[j] - dot) / temperature;
        }
    }
    out
}
