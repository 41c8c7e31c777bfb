//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! Every differentiable operation appends a node to the tape; node inputs
//! always precede the node, so the list is already in topological order and
//! `backward` is a single reverse sweep that visits each node exactly once.
//! The tape is built for one forward pass and discarded after backward; there
//! is no support for higher-order gradients.
//!
//! Gradients propagate only into subgraphs that can reach a `requires_grad`
//! leaf (tracked per node as `needs`), so frozen branches cost nothing on the
//! way back.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

/// Key-position mask for attention: which columns of the logit matrix are
/// attendable. `Cols` holds one flag per key (true = valid); `Causal`
/// restricts row `i` to columns `0..=i`.
#[derive(Debug, Clone)]
pub enum AttnMask {
    Cols(Vec<bool>),
    Causal,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Scale(Val, f64),
    Clamp(Val, f64, f64),
    Matmul(Val, Val),
    Transpose(Val),
    ConcatCols(Vec<Val>),
    SliceCols(Val, usize, usize),
    ConcatRows(Vec<Val>),
    SliceRows(Val, usize, usize),
    Sigmoid(Val),
    Gelu(Val),
    Exp(Val),
    Log(Val),
    SumAll(Val),
    MeanAll(Val),
    SoftmaxRows(Val, Option<AttnMask>),
    LayerNormRows {
        x: Val,
        gamma: Val,
        beta: Val,
        eps: f64,
    },
    AddRowVec(Val, Val),
    ScaleRows(Val, Val),
    MeanRows(Val),
    MaskedMeanRows(Val, Vec<bool>),
    GatherRows(Val, Vec<usize>),
    RestoreTokens {
        visible: Val,
        mask_token: Val,
        positions: Vec<usize>,
        n_total: usize,
    },
    L2NormalizeRows(Val),
    CrossEntropyRows {
        logits: Val,
        targets: Vec<usize>,
        keep: Vec<bool>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::contract(format!(
            "operation requires a rank-2 operand, got shape {other:?}"
        ))),
    }
}

/// tanh-form GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs: bool) -> Val {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs,
        });
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs
    }

    /// Bind a tensor as a leaf; gradient participation follows
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Non-participating constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Val {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.push(data, shape, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Val {
        self.push(vec![v], vec![], Op::Leaf, false)
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Val) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Val) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape node consistent")
    }

    /// Gradient buffer of any node after `backward`; `None` for nodes off the
    /// differentiation path.
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Whether gradients flow into this node at all.
    pub fn needs_grad(&self, v: Val) -> bool {
        self.nodes[v.0].needs
    }

    // ── Elementwise and scalar ops ───────────────────────────────────

    fn check_same_shape(&self, ctx: &'static str, a: Val, b: Val) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(data, shape, Op::Scale(a, c), needs)
    }

    pub fn clamp(&mut self, a: Val, lo: f64, hi: f64) -> Val {
        let data = self.nodes[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(data, shape, Op::Clamp(a, lo, hi), needs)
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(data, shape, Op::Sigmoid(a), needs)
    }

    pub fn gelu(&mut self, a: Val) -> Val {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(data, shape, Op::Gelu(a), needs)
    }

    pub fn exp(&mut self, a: Val) -> Val {
        let data = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(data, shape, Op::Exp(a), needs)
    }

    /// Natural log; caller must keep inputs positive (clamp first if needed).
    pub fn log(&mut self, a: Val) -> Result<Val> {
        if self.nodes[a.0].data.iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("log requires strictly positive inputs"));
        }
        let data = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(data, shape, Op::Log(a), needs))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Val) -> Val {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![s], vec![], Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Val) -> Val {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![s / n], vec![], Op::MeanAll(a), needs)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = rows_cols(self.shape(a))?;
        let (k2, n) = rows_cols(self.shape(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        let (r, c) = rows_cols(self.shape(a))?;
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, vec![c, r], Op::Transpose(a), needs))
    }

    // ── Concatenation and slicing ────────────────────────────────────

    /// Concatenate rank-2 operands along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero operands"));
        }
        let (rows, _) = rows_cols(self.shape(parts[0]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p))?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.nodes[p.0].data;
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, vec![rows, total], Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_cols(&mut self, a: Val, start: usize, len: usize) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(a))?;
        if start + len > cols {
            return Err(Error::contract(format!(
                "slice_cols {start}..{} out of bounds for width {cols}",
                start + len
            )));
        }
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&ad[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(out, vec![rows, len], Op::SliceCols(a, start, len), needs))
    }

    /// Stack operands along rows. Rank-1 operands count as a single row; all
    /// operands must share the column extent.
    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero operands"));
        }
        let width = match self.shape(parts[0]) {
            [c] => *c,
            [_, c] => *c,
            other => {
                return Err(Error::contract(format!(
                    "concat_rows operand must be rank 1 or 2, got {other:?}"
                )))
            }
        };
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = match self.shape(p) {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                other => {
                    return Err(Error::contract(format!(
                        "concat_rows operand must be rank 1 or 2, got {other:?}"
                    )))
                }
            };
            if c != width {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * width);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            vec![total_rows, width],
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_rows(&mut self, a: Val, start: usize, len: usize) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(a))?;
        if start + len > rows {
            return Err(Error::contract(format!(
                "slice_rows {start}..{} out of bounds for {rows} rows",
                start + len
            )));
        }
        let ad = &self.nodes[a.0].data;
        let out = ad[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(out, vec![len, cols], Op::SliceRows(a, start, len), needs))
    }

    // ── Row-structured ops ───────────────────────────────────────────

    /// Numerically stable softmax along the last dimension, with optional
    /// key masking. Masked columns get exactly zero weight; a row whose keys
    /// are all masked comes out all-zero rather than softmax over -inf.
    pub fn softmax_rows(&mut self, a: Val, mask: Option<&AttnMask>) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(a))?;
        if let Some(AttnMask::Cols(m)) = mask {
            if m.len() != cols {
                return Err(Error::contract(format!(
                    "key mask length {} does not match {} columns",
                    m.len(),
                    cols
                )));
            }
        }
        if let Some(AttnMask::Causal) = mask {
            if rows != cols {
                return Err(Error::dim("causal softmax", &[rows], &[cols]));
            }
        }
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let valid = |j: usize| match mask {
                None => true,
                Some(AttnMask::Cols(m)) => m[j],
                Some(AttnMask::Causal) => j <= r,
            };
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if valid(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // all keys masked: zero row
            }
            let mut sum = 0.0;
            for j in 0..cols {
                if valid(j) {
                    let e = (row[j] - max).exp();
                    out[r * cols + j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            out,
            vec![rows, cols],
            Op::SoftmaxRows(a, mask.cloned()),
            needs,
        ))
    }

    /// Per-row layer normalization with population variance, then an affine
    /// transform by `gamma`/`beta` (both rank-1 of the row width).
    pub fn layer_norm_rows(&mut self, x: Val, gamma: Val, beta: Val, eps: f64) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(x))?;
        if self.shape(gamma) != [cols] {
            return Err(Error::dim("layer_norm gamma", self.shape(x), self.shape(gamma)));
        }
        if self.shape(beta) != [cols] {
            return Err(Error::dim("layer_norm beta", self.shape(x), self.shape(beta)));
        }
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = gd[j] * (row[j] - mean) * inv + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            vec![rows, cols],
            Op::LayerNormRows { x, gamma, beta, eps },
            needs,
        ))
    }

    /// Add a rank-1 vector to every row of a rank-2 operand.
    pub fn add_row_vec(&mut self, x: Val, v: Val) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(x))?;
        if self.shape(v) != [cols] {
            return Err(Error::dim("add_row_vec", self.shape(x), self.shape(v)));
        }
        let xd = &self.nodes[x.0].data;
        let vd = &self.nodes[v.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = xd[r * cols + j] + vd[j];
            }
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(out, vec![rows, cols], Op::AddRowVec(x, v), needs))
    }

    /// Scale each row of `x` by the matching entry of `s` (shape `[n]` or
    /// `[n, 1]`).
    pub fn scale_rows(&mut self, x: Val, s: Val) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(x))?;
        let s_len = match self.shape(s) {
            [n] | [n, 1] => *n,
            other => {
                return Err(Error::contract(format!(
                    "scale_rows scaler must be [n] or [n,1], got {other:?}"
                )))
            }
        };
        if s_len != rows {
            return Err(Error::dim("scale_rows", self.shape(x), self.shape(s)));
        }
        let xd = &self.nodes[x.0].data;
        let sd = &self.nodes[s.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = xd[r * cols + j] * sd[r];
            }
        }
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(out, vec![rows, cols], Op::ScaleRows(x, s), needs))
    }

    /// Arithmetic mean over rows: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Val) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(x))?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                out[j] += xd[r * cols + j];
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(out, vec![cols], Op::MeanRows(x), needs))
    }

    /// Mean over the rows flagged valid; errors when no row is valid.
    pub fn masked_mean_rows(&mut self, x: Val, mask: &[bool]) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(x))?;
        if mask.len() != rows {
            return Err(Error::contract(format!(
                "row mask length {} does not match {} rows",
                mask.len(),
                rows
            )));
        }
        let n_valid = mask.iter().filter(|&&b| b).count();
        if n_valid == 0 {
            return Err(Error::contract("masked mean over zero valid rows"));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            if mask[r] {
                for j in 0..cols {
                    out[j] += xd[r * cols + j];
                }
            }
        }
        for v in &mut out {
            *v /= n_valid as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(out, vec![cols], Op::MaskedMeanRows(x, mask.to_vec()), needs))
    }

    /// Row lookup into a `[V, d]` table; duplicate ids allowed, gradients
    /// scatter-add back.
    pub fn gather_rows(&mut self, table: Val, ids: &[usize]) -> Result<Val> {
        let (v, d) = rows_cols(self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "row id {bad} out of range for table with {v} rows"
            )));
        }
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            Op::GatherRows(table, ids.to_vec()),
            needs,
        ))
    }

    /// Rebuild a full `[n_total, d]` token grid from encoded visible rows and
    /// a shared mask token placed at every non-visible position.
    pub fn restore_tokens(
        &mut self,
        visible: Val,
        mask_token: Val,
        positions: &[usize],
        n_total: usize,
    ) -> Result<Val> {
        let (n_vis, d) = rows_cols(self.shape(visible))?;
        if positions.len() != n_vis {
            return Err(Error::contract(format!(
                "{} visible rows but {} positions",
                n_vis,
                positions.len()
            )));
        }
        if self.shape(mask_token) != [d] {
            return Err(Error::dim(
                "restore_tokens mask token",
                self.shape(visible),
                self.shape(mask_token),
            ));
        }
        let mut seen = vec![false; n_total];
        for &p in positions {
            if p >= n_total || seen[p] {
                return Err(Error::contract(format!(
                    "invalid or duplicate visible position {p}"
                )));
            }
            seen[p] = true;
        }
        let vd = &self.nodes[visible.0].data;
        let md = &self.nodes[mask_token.0].data;
        let mut out = vec![0.0; n_total * d];
        for p in 0..n_total {
            out[p * d..(p + 1) * d].copy_from_slice(md);
        }
        for (i, &p) in positions.iter().enumerate() {
            out[p * d..(p + 1) * d].copy_from_slice(&vd[i * d..(i + 1) * d]);
        }
        let needs = self.needs(visible) || self.needs(mask_token);
        Ok(self.push(
            out,
            vec![n_total, d],
            Op::RestoreTokens {
                visible,
                mask_token,
                positions: positions.to_vec(),
                n_total,
            },
            needs,
        ))
    }

    /// L2-normalize each row; errors on (numerically) zero rows.
    pub fn l2_normalize_rows(&mut self, x: Val) -> Result<Val> {
        let (rows, cols) = rows_cols(self.shape(x))?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::contract(format!(
                    "cannot normalize row {r}: norm {norm:.3e} is numerically zero"
                )));
            }
            for j in 0..cols {
                out[r * cols + j] = row[j] / norm;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, vec![rows, cols], Op::L2NormalizeRows(x), needs))
    }

    /// Mean token-level negative log-likelihood over the kept positions,
    /// computed with a stable log-sum-exp.
    pub fn cross_entropy_rows(&mut self, logits: Val, targets: &[usize], keep: &[bool]) -> Result<Val> {
        let (rows, classes) = rows_cols(self.shape(logits))?;
        if targets.len() != rows || keep.len() != rows {
            return Err(Error::contract(format!(
                "cross entropy over {rows} rows needs {rows} targets and keep flags, got {} and {}",
                targets.len(),
                keep.len()
            )));
        }
        let n_kept = keep.iter().filter(|&&k| k).count();
        if n_kept == 0 {
            return Err(Error::contract("cross entropy with no unignored positions"));
        }
        for (r, (&t, &k)) in targets.iter().zip(keep).enumerate() {
            if k && t >= classes {
                return Err(Error::contract(format!(
                    "target {t} out of range for {classes} classes at row {r}"
                )));
            }
        }
        let ld = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for r in 0..rows {
            if !keep[r] {
                continue;
            }
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[r]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![total / n_kept as f64],
            vec![],
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                keep: keep.to_vec(),
            },
            needs,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradient buffers for every
    /// node on the differentiation path; leaves bound from tensors with
    /// `requires_grad == false` are left untouched.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Val, delta: &[f64]) {
        if !self.nodes[target.0].needs {
            return;
        }
        let buf = self.grads[target.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[target.0].data.len()]);
        debug_assert_eq!(buf.len(), delta.len());
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    fn propagate(&mut self, i: usize, grad: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, grad);
                let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| if x > lo && x < hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(g, &e)| g * e)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| g / x)
                    .collect();
                self.accumulate(a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![grad[0]; self.nodes[a.0].data.len()];
                self.accumulate(a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].data.len();
                let da = vec![grad[0] / n as f64; n];
                self.accumulate(a, &da);
            }
            Op::Matmul(a, b) => {
                let (m, k) = rows_cols(self.shape(a)).unwrap();
                let n = self.shape(b)[1];
                let ad = self.nodes[a.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                for i2 in 0..m {
                    for j in 0..n {
                        let g = grad[i2 * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i2 * k + p] += g * bd[p * n + j];
                        }
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                for i2 in 0..m {
                    for p in 0..k {
                        let av = ad[i2 * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * grad[i2 * n + j];
                        }
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(self.shape(a)).unwrap();
                let mut da = vec![0.0; r * c];
                for i2 in 0..c {
                    for j in 0..r {
                        da[j * c + i2] = grad[i2 * r + j];
                    }
                }
                self.accumulate(a, &da);
            }
            Op::ConcatCols(parts) => {
                let total = self.shape(Val(i))[1];
                let rows = self.shape(Val(i))[0];
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(p, &dp);
                    offset += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (rows, cols) = rows_cols(self.shape(a)).unwrap();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&grad[r * len..(r + 1) * len]);
                }
                self.accumulate(a, &da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].data.len();
                    let dp = grad[offset..offset + len].to_vec();
                    self.accumulate(p, &dp);
                    offset += len;
                }
            }
            Op::SliceRows(a, start, len) => {
                let (rows, cols) = rows_cols(self.shape(a)).unwrap();
                let mut da = vec![0.0; rows * cols];
                da[start * cols..(start + len) * cols].copy_from_slice(grad);
                self.accumulate(a, &da);
            }
            Op::SoftmaxRows(a, mask) => {
                let (rows, cols) = rows_cols(self.shape(Val(i))).unwrap();
                let out = &self.nodes[i].data;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let valid = |j: usize| match &mask {
                        None => true,
                        Some(AttnMask::Cols(m)) => m[j],
                        Some(AttnMask::Causal) => j <= r,
                    };
                    let mut dot = 0.0;
                    for j in 0..cols {
                        if valid(j) {
                            dot += grad[r * cols + j] * out[r * cols + j];
                        }
                    }
                    for j in 0..cols {
                        if valid(j) {
                            da[r * cols + j] = out[r * cols + j] * (grad[r * cols + j] - dot);
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (rows, cols) = rows_cols(self.shape(x)).unwrap();
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gamma.0].data.clone();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let g_row = &grad[r * cols..(r + 1) * cols];
                    let mut h_mean = 0.0;
                    let mut hx_mean = 0.0;
                    for j in 0..cols {
                        let h = g_row[j] * gd[j];
                        h_mean += h;
                        hx_mean += h * xhat[j];
                        dgamma[j] += g_row[j] * xhat[j];
                        dbeta[j] += g_row[j];
                    }
                    h_mean /= cols as f64;
                    hx_mean /= cols as f64;
                    for j in 0..cols {
                        let h = g_row[j] * gd[j];
                        dx[r * cols + j] = inv * (h - h_mean - xhat[j] * hx_mean);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::AddRowVec(x, v) => {
                let (rows, cols) = rows_cols(self.shape(x)).unwrap();
                self.accumulate(x, grad);
                let mut dv = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        dv[j] += grad[r * cols + j];
                    }
                }
                self.accumulate(v, &dv);
            }
            Op::ScaleRows(x, s) => {
                let (rows, cols) = rows_cols(self.shape(x)).unwrap();
                let xd = self.nodes[x.0].data.clone();
                let sd = self.nodes[s.0].data.clone();
                let mut dx = vec![0.0; rows * cols];
                let mut ds = vec![0.0; rows];
                for r in 0..rows {
                    for j in 0..cols {
                        dx[r * cols + j] = grad[r * cols + j] * sd[r];
                        ds[r] += grad[r * cols + j] * xd[r * cols + j];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(s, &ds);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = rows_cols(self.shape(x)).unwrap();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        dx[r * cols + j] = grad[j] / rows as f64;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::MaskedMeanRows(x, mask) => {
                let (rows, cols) = rows_cols(self.shape(x)).unwrap();
                let n_valid = mask.iter().filter(|&&b| b).count() as f64;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    if mask[r] {
                        for j in 0..cols {
                            dx[r * cols + j] = grad[j] / n_valid;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::GatherRows(table, ids) => {
                let (v, d) = rows_cols(self.shape(table)).unwrap();
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += grad[r * d + j];
                    }
                }
                self.accumulate(table, &dt);
            }
            Op::RestoreTokens {
                visible,
                mask_token,
                positions,
                n_total,
            } => {
                let d = self.shape(mask_token)[0];
                let mut dvis = vec![0.0; positions.len() * d];
                let mut is_visible = vec![false; n_total];
                for (r, &p) in positions.iter().enumerate() {
                    is_visible[p] = true;
                    dvis[r * d..(r + 1) * d].copy_from_slice(&grad[p * d..(p + 1) * d]);
                }
                let mut dmask = vec![0.0; d];
                for p in 0..n_total {
                    if !is_visible[p] {
                        for j in 0..d {
                            dmask[j] += grad[p * d + j];
                        }
                    }
                }
                self.accumulate(visible, &dvis);
                self.accumulate(mask_token, &dmask);
            }
            Op::L2NormalizeRows(x) => {
                let (rows, cols) = rows_cols(self.shape(x)).unwrap();
                let xd = self.nodes[x.0].data.clone();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let g_row = &grad[r * cols..(r + 1) * cols];
                    let dot: f64 = row.iter().zip(g_row).map(|(x2, g)| x2 * g).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = g_row[j] / norm - row[j] * dot / (norm * norm * norm);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                keep,
            } => {
                let (rows, classes) = rows_cols(self.shape(logits)).unwrap();
                let ld = self.nodes[logits.0].data.clone();
                let n_kept = keep.iter().filter(|&&k| k).count() as f64;
                let g = grad[0] / n_kept;
                let mut dl = vec![0.0; rows * classes];
                for r in 0..rows {
                    if !keep[r] {
                        continue;
                    }
                    let row = &ld[r * classes..(r + 1) * classes];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..classes {
                        let p = (row[j] - max).exp() / sum;
                        dl[r * classes + j] = g * (p - if j == targets[r] { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(logits, &dl);
            }
        }
    }
}
