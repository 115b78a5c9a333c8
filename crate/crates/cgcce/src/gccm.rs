//! Global cross correlation: channel/spatial gating of deep features
//! followed by cross-temporal linear-angle attention.
//!
//! The angular similarity `1 − (1/π)(π/2 − arcsin(q·k))` is replaced in
//! the network by its linear form `1/2 + (q·k)/π`, which lets the
//! attention product associate as `Q·(KᵀV)` and stay linear in token
//! count. The exact arcsin form is kept only as a test oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamSession, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Exact angular similarity of two unit vectors, in [0,1].
pub fn angle_similarity_exact(q: &[f64], k: &[f64]) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::Shape(format!("vector lengths differ: {} vs {}", q.len(), k.len())));
    }
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    if !dot.is_finite() {
        return Err(Error::Data("non-finite input to angle similarity".into()));
    }
    // unit-norm inputs keep |dot| <= 1 up to rounding
    let dot = dot.clamp(-1.0, 1.0);
    Ok(1.0 - (std::f64::consts::FRAC_PI_2 - dot.asin()) / std::f64::consts::PI)
}

/// Linear form of the angular similarity: `1/2 + x/π`.
pub fn angle_similarity_linear(x: f64) -> f64 {
    0.5 + x / std::f64::consts::PI
}

/// Cross-correlation of one attention head:
/// `H = ½·V + (1/π)·Q·(KᵀV)`, associated right-first so the cost is
/// linear in token count.
pub fn cross_correlate(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("{name} must be [tokens, dim], got {:?}", t.shape())));
        }
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "q/k/v shapes differ: {:?} / {:?} / {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let tape = Tape::inference();
    let out = cross_correlate_vars(&tape, &tape.leaf(q.clone()), &tape.leaf(k.clone()), &tape.leaf(v.clone()));
    Ok(out.value)
}

/// Tape-level cross-correlation (shapes already validated).
pub fn cross_correlate_vars(tape: &Tape, q: &Var, k: &Var, v: &Var) -> Var {
    let kt_v = {
        let kt = tape.transpose2(k);
        tape.matmul(&kt, v)
    };
    let qkt_v = tape.matmul(q, &kt_v);
    let half_v = tape.scale(v, 0.5);
    tape.add(&half_v, &tape.scale(&qkt_v, 1.0 / std::f64::consts::PI))
}

/// Per-channel gate from pooled descriptors through a shared bottleneck.
#[derive(Clone, Debug)]
pub struct ChannelGate {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl ChannelGate {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, channels: usize) -> Self {
        let hidden = (channels / 8).max(1);
        ChannelGate {
            fc1: Linear::new(params, rng, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(params, rng, &format!("{name}.fc2"), hidden, channels),
            channels,
        }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var) -> Var {
        self.forward_with_gate(tape, sess, x).0
    }

    /// Returns (gated output, per-channel gate in (0,1)).
    pub fn forward_with_gate(&self, tape: &Tape, sess: &ParamSession, x: &Var) -> (Var, Var) {
        let c = self.channels;
        let avg = tape.reshape(&tape.global_avg_pool(x), &[1, c]);
        let max = tape.reshape(&tape.global_max_pool(x), &[1, c]);
        let squeeze = |d: &Var| {
            let h = tape.relu(&self.fc1.forward(tape, sess, d));
            self.fc2.forward(tape, sess, &h)
        };
        let gate = tape.sigmoid(&tape.add(&squeeze(&avg), &squeeze(&max)));
        let gate_c = tape.reshape(&gate, &[c]);
        (tape.mul_channels(x, &gate_c), gate_c)
    }

    /// Map-level forward for contract checks.
    pub fn forward_map(&self, store: &Params, x: &Tensor) -> Result<Tensor> {
        let (out, _) = self.forward_map_with_gate(store, x)?;
        Ok(out)
    }

    /// Returns (gated output, gate values).
    pub fn forward_map_with_gate(&self, store: &Params, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.rank() != 3 || x.dim(0) != self.channels {
            return Err(Error::Shape(format!(
                "channel gate input must be [{}, h, w], got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let xv = tape.leaf(x.clone());
        let (out, gate) = self.forward_with_gate(&tape, &sess, &xv);
        Ok((out.value, gate.value))
    }
}

/// Single-channel spatial gate from channel-wise mean/max maps.
#[derive(Clone, Debug)]
pub struct SpatialGate {
    pub conv: Conv2d,
}

impl SpatialGate {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str) -> Self {
        SpatialGate { conv: Conv2d::new(params, rng, &format!("{name}.conv"), 2, 1, 7, 1, 3, 1) }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var) -> Var {
        let mean = tape.channel_mean(x);
        let max = tape.channel_max(x);
        let desc = tape.concat_channels(&mean, &max);
        let gate = tape.sigmoid(&self.conv.forward(tape, sess, &desc));
        tape.mul_spatial(x, &gate)
    }

    pub fn forward_map(&self, store: &Params, x: &Tensor) -> Result<Tensor> {
        let (out, _) = self.forward_map_with_gate(store, x)?;
        Ok(out)
    }

    pub fn forward_map_with_gate(&self, store: &Params, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.rank() != 3 {
            return Err(Error::Shape(format!("spatial gate input must be [c,h,w], got {:?}", x.shape())));
        }
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let xv = tape.leaf(x.clone());
        let mean = tape.channel_mean(&xv);
        let max = tape.channel_max(&xv);
        let desc = tape.concat_channels(&mean, &max);
        let gate = tape.sigmoid(&self.conv.forward(&tape, &sess, &desc));
        let out = tape.mul_spatial(&xv, &gate);
        Ok((out.value, gate.value))
    }
}

/// Cross-temporal enhancement of one deep scale: channel + spatial gates
/// per branch (shared parameters), then linear-angle cross attention.
#[derive(Clone, Debug)]
pub struct GlobalCrossCorrelation {
    pub channel_gate: ChannelGate,
    pub spatial_gate: SpatialGate,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl GlobalCrossCorrelation {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0);
        GlobalCrossCorrelation {
            channel_gate: ChannelGate::new(params, rng, &format!("{name}.cab"), dim),
            spatial_gate: SpatialGate::new(params, rng, &format!("{name}.sab")),
            q: Linear::new(params, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(params, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(params, rng, &format!("{name}.v"), dim, dim),
            heads,
            dim,
        }
    }

    /// Tape-level forward over a feature-map pair. Returns the two
    /// cross-correlated weight maps, shapes matching the inputs.
    pub fn forward(&self, tape: &Tape, sess: &ParamSession, t1: &Var, t2: &Var) -> (Var, Var) {
        let (h, w) = (t1.value.dim(1), t1.value.dim(2));
        let enhance = |x: &Var| {
            let x = self.channel_gate.forward(tape, sess, x);
            self.spatial_gate.forward(tape, sess, &x)
        };
        let e1 = enhance(t1);
        let e2 = enhance(t2);
        let tok1 = tape.map_to_tokens(&e1);
        let tok2 = tape.map_to_tokens(&e2);
        let (q1, k1, v1) = (
            self.q.forward(tape, sess, &tok1),
            self.k.forward(tape, sess, &tok1),
            self.v.forward(tape, sess, &tok1),
        );
        let (q2, k2, v2) = (
            self.q.forward(tape, sess, &tok2),
            self.k.forward(tape, sess, &tok2),
            self.v.forward(tape, sess, &tok2),
        );
        let h1 = self.cross_heads(tape, &q1, &k2, &v1);
        let h2 = self.cross_heads(tape, &q2, &k1, &v2);
        (tape.tokens_to_map(&h1, h, w), tape.tokens_to_map(&h2, h, w))
    }

    /// Per-head cross correlation; queries are scaled by 1/√d_head so the
    /// QKᵀV term stays variance-controlled while ½·V keeps unit scale.
    fn cross_heads(&self, tape: &Tape, q: &Var, k: &Var, v: &Var) -> Var {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for hidx in 0..self.heads {
            let (from, to) = (hidx * dh, (hidx + 1) * dh);
            let qh = tape.scale(&tape.slice_cols(q, from, to), scale);
            let kh = tape.slice_cols(k, from, to);
            let vh = tape.slice_cols(v, from, to);
            outs.push(cross_correlate_vars(tape, &qh, &kh, &vh));
        }
        tape.concat_cols(&outs)
    }

    /// Map-level forward for contract checks and inference.
    pub fn forward_maps(&self, store: &Params, t1: &Tensor, t2: &Tensor) -> Result<(Tensor, Tensor)> {
        if t1.shape() != t2.shape() {
            return Err(Error::Shape(format!(
                "bi-temporal shapes differ: {:?} vs {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
        if t1.rank() != 3 || t1.dim(0) != self.dim {
            return Err(Error::Shape(format!(
                "cross-correlation input must be [{}, h, w], got {:?}",
                self.dim,
                t1.shape()
            )));
        }
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let v1 = tape.leaf(t1.clone());
        let v2 = tape.leaf(t2.clone());
        let (h1, h2) = self.forward(&tape, &sess, &v1, &v2);
        Ok((h1.value, h2.value))
    }
}
