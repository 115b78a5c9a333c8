//! Parameter storage and the layer primitives shared by all model parts.
//!
//! Parameters live in a flat, insertion-ordered store; modules keep plain
//! indices into it. The order is fixed by model construction, which makes
//! optimizer state, checkpoints, and seeded initialization reproducible.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const GN_EPS: f64 = 1e-6;
/// Initialization scale for projections and convolutions.
pub const INIT_STD: f64 = 0.02;

/// Flat, ordered parameter store.
#[derive(Clone)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Params {
        Params { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.values[idx]
    }

    pub fn set(&mut self, idx: usize, value: Tensor) {
        assert_eq!(self.values[idx].shape(), value.shape(), "parameter shape change");
        self.values[idx] = value;
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total number of trainable scalars.
    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Apply an update to one parameter in place.
    pub fn update(&mut self, idx: usize, f: impl FnMut(&mut f64)) {
        self.values[idx].data_mut().iter_mut().for_each(f);
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Registers one forward pass's leaf vars for parameters, tracking which
/// tape node belongs to which parameter slot.
pub struct ParamSession<'a> {
    pub store: &'a Params,
    bindings: std::cell::RefCell<Vec<(usize, usize)>>, // (param idx, var id)
}

impl<'a> ParamSession<'a> {
    pub fn new(store: &'a Params) -> Self {
        ParamSession { store, bindings: std::cell::RefCell::new(Vec::new()) }
    }

    pub fn leaf(&self, tape: &Tape, idx: usize) -> Var {
        let v = tape.leaf(self.store.get(idx).clone());
        self.bindings.borrow_mut().push((idx, v.id));
        v
    }

    /// (param index, tape var id) pairs bound during this forward pass.
    pub fn bindings(&self) -> Vec<(usize, usize)> {
        self.bindings.borrow().clone()
    }
}

fn init_weight(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.trunc_normal(INIT_STD))
}

/// Weight initialization families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal, σ = [`INIT_STD`]. Used by the encoder's
    /// projections, where layer norms bracket every transform.
    TruncNormal,
    /// Fan-in scaled truncated normal (He), σ = √(2/fan_in). Used by
    /// convolutional heads so activations start at unit scale.
    HeFanIn,
}

/// Token-matrix linear map `[n,in] -> [n,out]` with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize) -> Linear {
        let w = params.add(format!("{name}.w"), init_weight(rng, &[in_dim, out_dim]));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var) -> Var {
        let w = sess.leaf(tape, self.w);
        let b = sess.leaf(tape, self.b);
        let y = tape.matmul(x, &w);
        tape.add_bias_rows(&y, &b)
    }
}

/// 2-D convolution layer over `[c,h,w]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Fan-in initialized convolution (the default outside the encoder).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Conv2d {
        Self::with_init(params, rng, name, in_ch, out_ch, kernel, stride, pad, groups, Init::HeFanIn)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        init: Init,
    ) -> Conv2d {
        assert_eq!(in_ch % groups, 0);
        assert_eq!(out_ch % groups, 0);
        let shape = [out_ch, in_ch / groups, kernel, kernel];
        let weight = match init {
            Init::TruncNormal => init_weight(rng, &shape),
            Init::HeFanIn => {
                let std = (2.0 / ((in_ch / groups) * kernel * kernel) as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.trunc_normal(std))
            }
        };
        let w = params.add(format!("{name}.w"), weight);
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Conv2d { w, b, in_ch, out_ch, kernel, stride, pad, groups }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var) -> Var {
        let w = sess.leaf(tape, self.w);
        let b = sess.leaf(tape, self.b);
        tape.conv2d(x, &w, Some(&b), self.stride, self.pad, self.groups)
    }
}

/// Layer norm over token embeddings `[n,c]`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> LayerNorm {
        let gamma = params.add(format!("{name}.g"), Tensor::full(&[dim], 1.0));
        let beta = params.add(format!("{name}.b"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var) -> Var {
        let g = sess.leaf(tape, self.gamma);
        let b = sess.leaf(tape, self.beta);
        tape.layer_norm(x, &g, &b, LN_EPS)
    }
}

/// Group norm (single group = whole-map layer norm) over `[c,h,w]`.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(params: &mut Params, name: &str, channels: usize, groups: usize) -> GroupNorm {
        let gamma = params.add(format!("{name}.g"), Tensor::full(&[channels], 1.0));
        let beta = params.add(format!("{name}.b"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups, channels }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var) -> Var {
        let g = sess.leaf(tape, self.gamma);
        let b = sess.leaf(tape, self.beta);
        tape.group_norm(x, &g, &b, self.groups, GN_EPS)
    }
}

/// Set every normalization offset (layer/group norm beta) to a constant.
/// Gradient tests use a positive shift so rectifier inputs stay clear of
/// zero, where central differences are invalid.
pub fn set_norm_offsets(params: &mut Params, value: f64) {
    for idx in 0..params.len() {
        let name = params.name(idx).to_string();
        if name.contains("norm") && name.ends_with(".b") {
            let shape = params.get(idx).shape().to_vec();
            params.set(idx, Tensor::full(&shape, value));
        }
    }
}

/// Multi-head softmax attention on token matrices. Queries may come from a
/// different token set than keys/values. Returns the per-head attention
/// probabilities alongside the output for contract checks.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &Tape,
    q: &Var,
    k: &Var,
    v: &Var,
    heads: usize,
) -> (Var, Vec<Tensor>) {
    let dim = q.value.dim(1);
    assert_eq!(k.value.dim(1), dim, "key width mismatch");
    assert_eq!(v.value.dim(1), dim, "value width mismatch");
    assert_eq!(dim % heads, 0, "dim {dim} not divisible by heads {heads}");
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, from, to);
        let kh = tape.slice_cols(k, from, to);
        let vh = tape.slice_cols(v, from, to);
        let kt = tape.transpose2(&kh);
        let scores = tape.scale(&tape.matmul(&qh, &kt), scale);
        let attn = tape.softmax_rows(&scores);
        probs.push(attn.value.clone());
        outs.push(tape.matmul(&attn, &vh));
    }
    (tape.concat_cols(&outs), probs)
}
