//! Semantic enhancement of concatenated features: multi-kernel local
//! context modulated by a pooled global gate, applied residually.
//!
//! `out = c + MC ⊙ GC` with `MC = conv1×1(Σ_k conv_k×k(c))` and
//! `GC = sigmoid(avgpool(conv1×1(c)))`, a per-channel scalar gate. The
//! k×k branches are depthwise (channel-preserving); the 1×1 aggregation
//! provides the cross-channel mixing.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSession, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SemanticEnhancement {
    /// One depthwise k×k convolution per configured kernel size.
    pub branches: Vec<Conv2d>,
    /// 1×1 aggregation after the branch sum.
    pub agg: Conv2d,
    /// 1×1 context convolution feeding global average pooling.
    pub ctx: Conv2d,
    pub channels: usize,
}

impl SemanticEnhancement {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, channels: usize, kernels: &[usize]) -> Self {
        let branches = kernels
            .iter()
            .map(|&k| {
                assert!(k % 2 == 1, "even kernel {k}");
                Conv2d::new(params, rng, &format!("{name}.k{k}"), channels, channels, k, 1, k / 2, channels)
            })
            .collect();
        SemanticEnhancement {
            branches,
            agg: Conv2d::new(params, rng, &format!("{name}.agg"), channels, channels, 1, 1, 0, 1),
            ctx: Conv2d::new(params, rng, &format!("{name}.ctx"), channels, channels, 1, 1, 0, 1),
            channels,
        }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, c: &Var) -> Var {
        self.forward_with_gate(tape, sess, c).0
    }

    /// Returns (enhanced map, per-channel global-context gate).
    pub fn forward_with_gate(&self, tape: &Tape, sess: &ParamSession, c: &Var) -> (Var, Var) {
        let mut summed: Option<Var> = None;
        for branch in &self.branches {
            let b = branch.forward(tape, sess, c);
            summed = Some(match summed {
                Some(acc) => tape.add(&acc, &b),
                None => b,
            });
        }
        let local = self.agg.forward(tape, sess, &summed.expect("at least one kernel"));
        let gate = tape.sigmoid(&tape.global_avg_pool(&self.ctx.forward(tape, sess, c)));
        let modulated = tape.mul_channels(&local, &gate);
        (tape.add(c, &modulated), gate)
    }

    /// Map-level forward for contract checks and inference.
    pub fn forward_map(&self, store: &Params, c: &Tensor) -> Result<Tensor> {
        let (out, _) = self.forward_map_with_gate(store, c)?;
        Ok(out)
    }

    pub fn forward_map_with_gate(&self, store: &Params, c: &Tensor) -> Result<(Tensor, Tensor)> {
        if c.rank() != 3 || c.dim(0) != self.channels {
            return Err(Error::Shape(format!(
                "enhancement input must be [{}, h, w], got {:?}",
                self.channels,
                c.shape()
            )));
        }
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let cv = tape.leaf(c.clone());
        let (out, gate) = self.forward_with_gate(&tape, &sess, &cv);
        Ok((out.value, gate.value))
    }
}
