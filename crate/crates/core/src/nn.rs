//! Neural primitives: layer norm, linear/MLP layers, multi-head attention
//! with key-padding masks, pooling, and the parameter-traversal machinery
//! (stable path names) used by the optimizer, checkpoints, and freeze
//! digests.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{AttnMask, Tape, Val};
use crate::tensor::Tensor;

// ── Parameter traversal ──────────────────────────────────────────────

/// Visit every parameter tensor under a stable dotted path name. The same
/// traversal order backs tape binding, gradient harvest, checkpointing, and
/// freeze digests, so the order and names must never depend on runtime state.
pub trait ParamSet {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn param_names(ps: &impl ParamSet) -> Vec<String> {
    let mut names = Vec::new();
    ps.for_each("", &mut |name, _| names.push(name.to_string()));
    names
}

pub fn count_scalars(ps: &impl ParamSet) -> usize {
    let mut n = 0;
    ps.for_each("", &mut |_, t| n += t.numel());
    n
}

/// Write harvested gradients into the matching tensors; entries without a
/// gradient are left untouched.
pub fn apply_grads(ps: &mut impl ParamSet, grads: &HashMap<String, Vec<f64>>) {
    ps.for_each_mut("", &mut |name, t| {
        if let Some(g) = grads.get(name) {
            t.grad = Some(g.clone());
        }
    });
}

pub fn set_trainable(ps: &mut impl ParamSet, prefix_filter: &str, trainable: bool) {
    ps.for_each_mut("", &mut |name, t| {
        if name.starts_with(prefix_filter) {
            t.requires_grad = trainable;
        }
    });
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Binds parameter tensors onto a tape, recording `(name, handle)` pairs so
/// gradients can be harvested by name after backward.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    prefix: Vec<String>,
    bound: Vec<(String, Val)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Binder {
            tape,
            prefix: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        if name.is_empty() {
            return f(self);
        }
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn leaf(&mut self, name: &str, t: &Tensor) -> Val {
        let path = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix.join("."), name)
        };
        let v = self.tape.leaf(t);
        self.bound.push((path, v));
        v
    }

    pub fn into_bound(self) -> Vec<(String, Val)> {
        self.bound
    }
}

/// Collect gradients of bound leaves by path name. Only leaves that actually
/// received a gradient appear in the map.
pub fn harvest_grads(tape: &Tape, bound: &[(String, Val)]) -> HashMap<String, Vec<f64>> {
    let mut out = HashMap::new();
    for (name, val) in bound {
        if let Some(g) = tape.grad(*val) {
            out.insert(name.clone(), g.to_vec());
        }
    }
    out
}

// ── Key-padding mask ─────────────────────────────────────────────────

/// Boolean sequence over key positions; `true` marks a valid (attendable)
/// position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMask(Vec<bool>);

impl KeyMask {
    pub fn new(flags: Vec<bool>) -> Self {
        KeyMask(flags)
    }

    pub fn all_valid(n: usize) -> Self {
        KeyMask(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn valid_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

// ── Layer norm ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(vec![d], 1.0),
            beta: Tensor::zeros(vec![d]),
            eps: LN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> LnVals {
        b.scoped(name, |b| LnVals {
            gamma: b.leaf("gamma", &self.gamma),
            beta: b.leaf("beta", &self.beta),
            eps: self.eps,
        })
    }
}

impl ParamSet for LayerNormParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Copy)]
pub struct LnVals {
    pub gamma: Val,
    pub beta: Val,
    pub eps: f64,
}

/// Per-row zero-mean unit-variance normalization (population variance) with
/// affine scale and shift.
pub fn layer_norm(tape: &mut Tape, x: Val, p: &LnVals) -> Result<Val> {
    tape.layer_norm_rows(x, p.gamma, p.beta, p.eps)
}

// ── Linear ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl LinearParams {
    pub fn xavier(out_dim: usize, in_dim: usize, rng: &mut Stream) -> Self {
        LinearParams {
            weight: Tensor::xavier(out_dim, in_dim, rng),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> LinVals {
        b.scoped(name, |b| LinVals {
            weight: b.leaf("weight", &self.weight),
            bias: b.leaf("bias", &self.bias),
        })
    }
}

impl ParamSet for LinearParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct LinVals {
    pub weight: Val,
    pub bias: Val,
}

/// `x [n, in] -> x W^T + b [n, out]`.
pub fn linear(tape: &mut Tape, x: Val, p: &LinVals) -> Result<Val> {
    let wt = tape.transpose(p.weight)?;
    let y = tape.matmul(x, wt)?;
    tape.add_row_vec(y, p.bias)
}

// ── MLP ──────────────────────────────────────────────────────────────

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub hidden: usize,
}

impl MlpParams {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Stream) -> Self {
        MlpParams {
            l1: LinearParams::xavier(hidden, in_dim, rng),
            l2: LinearParams::xavier(out_dim, hidden, rng),
            hidden,
        }
    }

    /// Same shape, but the output layer starts at exactly zero.
    pub fn zero_final(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Stream) -> Self {
        MlpParams {
            l1: LinearParams::xavier(hidden, in_dim, rng),
            l2: LinearParams::zeros(out_dim, hidden),
            hidden,
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> MlpVals {
        b.scoped(name, |b| MlpVals {
            l1: self.l1.bind(b, "l1"),
            l2: self.l2.bind(b, "l2"),
        })
    }
}

impl ParamSet for MlpParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.l1.for_each(&join(prefix, "l1"), f);
        self.l2.for_each(&join(prefix, "l2"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l1.for_each_mut(&join(prefix, "l1"), f);
        self.l2.for_each_mut(&join(prefix, "l2"), f);
    }
}

#[derive(Clone, Copy)]
pub struct MlpVals {
    pub l1: LinVals,
    pub l2: LinVals,
}

pub fn mlp(tape: &mut Tape, x: Val, p: &MlpVals) -> Result<Val> {
    let h = linear(tape, x, &p.l1)?;
    let a = tape.gelu(h);
    linear(tape, a, &p.l2)
}

// ── Multi-head attention ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MhaParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub heads: usize,
}

impl MhaParams {
    pub fn new(d: usize, heads: usize, rng: &mut Stream) -> Self {
        assert!(d % heads == 0, "model dim {d} not divisible by {heads} heads");
        MhaParams {
            wq: LinearParams::xavier(d, d, rng),
            wk: LinearParams::xavier(d, d, rng),
            wv: LinearParams::xavier(d, d, rng),
            wo: LinearParams::xavier(d, d, rng),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.out_dim()
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> MhaVals {
        b.scoped(name, |b| MhaVals {
            wq: self.wq.bind(b, "wq"),
            wk: self.wk.bind(b, "wk"),
            wv: self.wv.bind(b, "wv"),
            wo: self.wo.bind(b, "wo"),
            heads: self.heads,
        })
    }
}

impl ParamSet for MhaParams {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.wq.for_each(&join(prefix, "wq"), f);
        self.wk.for_each(&join(prefix, "wk"), f);
        self.wv.for_each(&join(prefix, "wv"), f);
        self.wo.for_each(&join(prefix, "wo"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.wq.for_each_mut(&join(prefix, "wq"), f);
        self.wk.for_each_mut(&join(prefix, "wk"), f);
        self.wv.for_each_mut(&join(prefix, "wv"), f);
        self.wo.for_each_mut(&join(prefix, "wo"), f);
    }
}

#[derive(Clone, Copy)]
pub struct MhaVals {
    pub wq: LinVals,
    pub wk: LinVals,
    pub wv: LinVals,
    pub wo: LinVals,
    pub heads: usize,
}

fn attention_inner(
    tape: &mut Tape,
    q: Val,
    k: Val,
    v: Val,
    p: &MhaVals,
    mask: Option<AttnMask>,
) -> Result<Val> {
    let d = tape.shape(q)[1];
    if d != tape.shape(k)[1] || tape.shape(k) != tape.shape(v) {
        return Err(Error::dim("attention q/k/v", tape.shape(q), tape.shape(k)));
    }
    let dh = d / p.heads;
    let qp = linear(tape, q, &p.wq)?;
    let kp = linear(tape, k, &p.wk)?;
    let vp = linear(tape, v, &p.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qi = tape.slice_cols(qp, h * dh, dh)?;
        let ki = tape.slice_cols(kp, h * dh, dh)?;
        let vi = tape.slice_cols(vp, h * dh, dh)?;
        let kt = tape.transpose(ki)?;
        let logits = tape.matmul(qi, kt)?;
        let scaled = tape.scale(logits, scale);
        let weights = tape.softmax_rows(scaled, mask.as_ref())?;
        head_outs.push(tape.matmul(weights, vi)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    linear(tape, concat, &p.wo)
}

/// Scaled dot-product attention per head, masked key positions receiving
/// exactly zero weight; heads concatenated then output-projected. A query
/// whose keys are all masked yields the bias-only output row (its attention
/// context is the zero vector).
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Val,
    k: Val,
    v: Val,
    p: &MhaVals,
    mask: Option<&KeyMask>,
) -> Result<Val> {
    if let Some(m) = mask {
        let n_k = tape.shape(k)[0];
        if m.len() != n_k {
            return Err(Error::contract(format!(
                "key mask length {} does not match {} keys",
                m.len(),
                n_k
            )));
        }
    }
    let mask = mask.map(|m| AttnMask::Cols(m.flags().to_vec()));
    attention_inner(tape, q, k, v, p, mask)
}

/// Self-attention where position `i` may attend only to positions `0..=i`.
pub fn causal_self_attention(tape: &mut Tape, x: Val, p: &MhaVals) -> Result<Val> {
    attention_inner(tape, x, x, x, p, Some(AttnMask::Causal))
}

// ── Pooling ──────────────────────────────────────────────────────────

/// Arithmetic mean over rows.
pub fn mean_pool(tape: &mut Tape, x: Val) -> Result<Val> {
    tape.mean_rows(x)
}

/// Mean over valid rows only; errors when the mask admits none.
pub fn masked_mean_pool(tape: &mut Tape, x: Val, mask: &KeyMask) -> Result<Val> {
    tape.masked_mean_rows(x, mask.flags())
}
