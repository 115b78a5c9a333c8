//! Weight-shared siamese pyramid encoder.
//!
//! Four stages of strided patch embedding followed by transformer blocks
//! with spatial-reduction attention and a depthwise-convolution feed
//! forward (which doubles as positional information, so no absolute
//! position embeddings are needed). Both temporal images run through the
//! same parameter set; applying the encoder twice IS the weight sharing.

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, STRIDES};
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Conv2d, Init, LayerNorm, Linear, ParamSession, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::types::FeaturePyramid;

const MLP_RATIO: usize = 4;

/// Self-attention whose keys/values come from a spatially reduced grid.
#[derive(Clone, Debug)]
pub struct SpatialReductionAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    /// Strided reduction conv + norm, present when `reduction > 1`.
    pub sr: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub reduction: usize,
    pub dim: usize,
}

impl SpatialReductionAttention {
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        reduction: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0);
        let q = Linear::new(params, rng, &format!("{name}.q"), dim, dim);
        let k = Linear::new(params, rng, &format!("{name}.k"), dim, dim);
        let v = Linear::new(params, rng, &format!("{name}.v"), dim, dim);
        let proj = Linear::new(params, rng, &format!("{name}.proj"), dim, dim);
        let sr = (reduction > 1).then(|| {
            (
                Conv2d::with_init(params, rng, &format!("{name}.sr"), dim, dim, reduction, reduction, 0, 1, Init::TruncNormal),
                LayerNorm::new(params, &format!("{name}.srnorm"), dim),
            )
        });
        SpatialReductionAttention { q, k, v, proj, sr, heads, reduction, dim }
    }

    /// Token-level forward; `(h, w)` is the grid the tokens came from.
    pub fn forward_tokens(
        &self,
        tape: &Tape,
        sess: &ParamSession,
        x: &Var,
        h: usize,
        w: usize,
    ) -> (Var, Vec<Tensor>) {
        assert_eq!(x.value.dim(0), h * w, "token grid mismatch");
        let q = self.q.forward(tape, sess, x);
        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                let map = tape.tokens_to_map(x, h, w);
                let red = conv.forward(tape, sess, &map);
                let toks = tape.map_to_tokens(&red);
                norm.forward(tape, sess, &toks)
            }
            None => x.clone(),
        };
        let k = self.k.forward(tape, sess, &kv_src);
        let v = self.v.forward(tape, sess, &kv_src);
        let (attn_out, probs) = multi_head_attention(tape, &q, &k, &v, self.heads);
        (self.proj.forward(tape, sess, &attn_out), probs)
    }

    /// Standalone map-level forward used by contract checks.
    pub fn forward_map(&self, store: &Params, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_map_with_probs(store, x)?.1)
    }

    /// Map-level forward returning per-head attention probabilities.
    pub fn forward_map_with_probs(&self, store: &Params, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        if x.rank() != 3 || x.dim(0) != self.dim {
            return Err(Error::Shape(format!(
                "attention input must be [{}, h, w], got {:?}",
                self.dim,
                x.shape()
            )));
        }
        let (h, w) = (x.dim(1), x.dim(2));
        if h % self.reduction != 0 || w % self.reduction != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} not divisible by reduction {}",
                self.reduction
            )));
        }
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let xv = tape.leaf(x.clone());
        let tokens = tape.map_to_tokens(&xv);
        let (out, probs) = self.forward_tokens(&tape, &sess, &tokens, h, w);
        let map = tape.tokens_to_map(&out, h, w);
        Ok((probs, map.value))
    }
}

/// Feed-forward with a depthwise 3×3 convolution between the two linears.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub dw: Conv2d,
    pub fc2: Linear,
    pub hidden: usize,
}

impl FeedForward {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, dim: usize) -> Self {
        let hidden = dim * MLP_RATIO;
        let fc1 = Linear::new(params, rng, &format!("{name}.fc1"), dim, hidden);
        let dw = Conv2d::with_init(params, rng, &format!("{name}.dw"), hidden, hidden, 3, 1, 1, hidden, Init::TruncNormal);
        let fc2 = Linear::new(params, rng, &format!("{name}.fc2"), hidden, dim);
        FeedForward { fc1, dw, fc2, hidden }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var, h: usize, w: usize) -> Var {
        let t = self.fc1.forward(tape, sess, x);
        let map = tape.tokens_to_map(&t, h, w);
        let map = self.dw.forward(tape, sess, &map);
        let t = tape.map_to_tokens(&map);
        let t = tape.gelu(&t);
        self.fc2.forward(tape, sess, &t)
    }
}

/// Pre-norm transformer block: attention then feed-forward, both residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: SpatialReductionAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        reduction: usize,
    ) -> Self {
        EncoderBlock {
            norm1: LayerNorm::new(params, &format!("{name}.norm1"), dim),
            attn: SpatialReductionAttention::new(params, rng, &format!("{name}.attn"), dim, heads, reduction),
            norm2: LayerNorm::new(params, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(params, rng, &format!("{name}.ffn"), dim),
        }
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var, h: usize, w: usize) -> Var {
        let normed = self.norm1.forward(tape, sess, x);
        let (attn, _) = self.attn.forward_tokens(tape, sess, &normed, h, w);
        let x = tape.add(x, &attn);
        let normed = self.norm2.forward(tape, sess, &x);
        let ffn = self.ffn.forward(tape, sess, &normed, h, w);
        tape.add(&x, &ffn)
    }
}

/// Strided convolutional patch embedding plus token norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let pad = kernel / 2;
        PatchEmbed {
            conv: Conv2d::with_init(params, rng, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, pad, 1, Init::TruncNormal),
            norm: LayerNorm::new(params, &format!("{name}.norm"), out_ch),
        }
    }

    /// Returns tokens and the embedded grid size.
    pub fn forward(&self, tape: &Tape, sess: &ParamSession, x: &Var) -> (Var, usize, usize) {
        let map = self.conv.forward(tape, sess, x);
        let (h, w) = (map.value.dim(1), map.value.dim(2));
        let tokens = tape.map_to_tokens(&map);
        (self.norm.forward(tape, sess, &tokens), h, w)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub patch: PatchEmbed,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

/// The 4-stage pyramid encoder.
#[derive(Clone, Debug)]
pub struct PvtEncoder {
    pub stages: Vec<EncoderStage>,
    pub channels: [usize; 4],
    pub tile_size: usize,
    pub sra_reduction: [usize; 4],
}

impl PvtEncoder {
    pub fn new(params: &mut Params, rng: &mut Rng, cfg: &ModelConfig) -> PvtEncoder {
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for j in 0..4 {
            let name = format!("enc.s{j}");
            let (kernel, stride) = if j == 0 { (7, 4) } else { (3, 2) };
            let patch = PatchEmbed::new(params, rng, &format!("{name}.pe"), in_ch, cfg.stage_channels[j], kernel, stride);
            let blocks = (0..cfg.stage_depths[j])
                .map(|b| {
                    EncoderBlock::new(
                        params,
                        rng,
                        &format!("{name}.blk{b}"),
                        cfg.stage_channels[j],
                        cfg.attn_heads[j],
                        cfg.sra_reduction[j],
                    )
                })
                .collect();
            let norm = LayerNorm::new(params, &format!("{name}.norm"), cfg.stage_channels[j]);
            stages.push(EncoderStage { patch, blocks, norm });
            in_ch = cfg.stage_channels[j];
        }
        PvtEncoder {
            stages,
            channels: cfg.stage_channels,
            tile_size: cfg.tile_size,
            sra_reduction: cfg.sra_reduction,
        }
    }

    /// Tape-level forward producing the four per-scale feature maps.
    pub fn forward(&self, tape: &Tape, sess: &ParamSession, image: &Var) -> [Var; 4] {
        let mut maps: Vec<Var> = Vec::with_capacity(4);
        let mut x = image.clone();
        for stage in &self.stages {
            let (mut tokens, h, w) = stage.patch.forward(tape, sess, &x);
            for block in &stage.blocks {
                tokens = block.forward(tape, sess, &tokens, h, w);
            }
            let tokens = stage.norm.forward(tape, sess, &tokens);
            let map = tape.tokens_to_map(&tokens, h, w);
            maps.push(map.clone());
            x = map;
        }
        maps.try_into().unwrap_or_else(|_| unreachable!())
    }

    /// Check the input against the configured tile size and reductions.
    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.rank() != 3 || image.dim(0) != 3 {
            return Err(Error::Shape(format!("encoder input must be [3,h,w], got {:?}", image.shape())));
        }
        let (h, w) = (image.dim(1), image.dim(2));
        if h != self.tile_size || w != self.tile_size {
            return Err(Error::Shape(format!(
                "encoder input {h}x{w} does not match configured tile size {}",
                self.tile_size
            )));
        }
        if !image.is_finite() {
            return Err(Error::Data("encoder input has non-finite values".into()));
        }
        for j in 0..4 {
            let side = self.tile_size / STRIDES[j];
            if side == 0 || side % self.sra_reduction[j] != 0 {
                return Err(Error::Shape(format!(
                    "stage {j} grid {side} not divisible by sra_reduction {}",
                    self.sra_reduction[j]
                )));
            }
        }
        Ok(())
    }

    /// Single-image encode through an inference tape.
    pub fn encode(&self, store: &Params, image: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(image)?;
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let img = tape.leaf(image.clone());
        let maps = self.forward(&tape, &sess, &img);
        Ok(FeaturePyramid::new(
            [
                maps[0].value.clone(),
                maps[1].value.clone(),
                maps[2].value.clone(),
                maps[3].value.clone(),
            ],
            self.channels,
        ))
    }

    /// Encode a batch of images; each entry is an independent forward.
    pub fn encode_batch(&self, store: &Params, images: &[Tensor]) -> Result<Vec<FeaturePyramid>> {
        images.iter().map(|img| self.encode(store, img)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{fd_grad, max_rel_err};
    use crate::config::validate_config;

    fn rand_image(side: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[3, side, side], |_| rng.next_f64())
    }

    fn toy_at(tile: usize) -> (ModelConfig, Params, PvtEncoder) {
        let cfg = validate_config(ModelConfig::toy().with_tile(tile)).unwrap();
        let mut params = Params::new();
        let mut rng = Rng::new(99);
        let enc = PvtEncoder::new(&mut params, &mut rng, &cfg);
        (cfg, params, enc)
    }

    #[test]
    fn pyramid_shapes_at_256() {
        let (cfg, params, enc) = toy_at(256);
        let img = rand_image(256, 1);
        let p = enc.encode(&params, &img).unwrap();
        p.debug_validate(&cfg);
        assert_eq!(p.scales[0].shape(), &[16, 64, 64]);
        assert_eq!(p.scales[1].shape(), &[32, 32, 32]);
        assert_eq!(p.scales[2].shape(), &[64, 16, 16]);
        assert_eq!(p.scales[3].shape(), &[128, 8, 8]);
    }

    #[test]
    fn encode_is_pure() {
        let (_, params, enc) = toy_at(64);
        let img = rand_image(64, 2);
        let a = enc.encode(&params, &img).unwrap();
        let b = enc.encode(&params, &img).unwrap();
        for j in 0..4 {
            assert_eq!(a.scales[j], b.scales[j], "scale {j} differs between runs");
        }
    }

    #[test]
    fn batch_equals_single_calls() {
        let (_, params, enc) = toy_at(64);
        let imgs = vec![rand_image(64, 3), rand_image(64, 4)];
        let batch = enc.encode_batch(&params, &imgs).unwrap();
        for (img, got) in imgs.iter().zip(&batch) {
            let single = enc.encode(&params, img).unwrap();
            for j in 0..4 {
                assert_eq!(single.scales[j], got.scales[j]);
            }
        }
    }

    #[test]
    fn wrong_input_size_rejected() {
        let (_, params, enc) = toy_at(64);
        let img = rand_image(32, 5);
        assert!(enc.encode(&params, &img).is_err());
    }

    /// With reduction 1 the layer is plain multi-head self-attention;
    /// compare against a direct softmax(QKᵀ/√d)V computation.
    #[test]
    fn sra_reduction_one_matches_vanilla_attention() {
        let mut params = Params::new();
        let mut rng = Rng::new(7);
        let dim = 8;
        let heads = 2;
        let sra = SpatialReductionAttention::new(&mut params, &mut rng, "sra", dim, heads, 1);
        let x = Tensor::from_fn(&[dim, 4, 3], |_| rng.range_f64(-1.0, 1.0));
        let got = sra.forward_map(&params, &x).unwrap();

        // oracle on plain tensors
        use crate::tensor as tz;
        let tokens = tz::map_to_tokens(&x);
        let lin = |w: usize, b: usize, x: &Tensor| -> Tensor {
            let y = tz::matmul(x, params.get(w));
            Tensor::from_fn(y.shape(), |i| y.data()[i] + params.get(b).data()[i % dim])
        };
        let q = lin(sra.q.w, sra.q.b, &tokens);
        let k = lin(sra.k.w, sra.k.b, &tokens);
        let v = lin(sra.v.w, sra.v.b, &tokens);
        let dh = dim / heads;
        let mut heads_out: Vec<Tensor> = Vec::new();
        for hidx in 0..heads {
            let cols = |m: &Tensor| tz::slice_cols(m, hidx * dh, (hidx + 1) * dh);
            let scores = tz::matmul_nt(&cols(&q), &cols(&k)).scale(1.0 / (dh as f64).sqrt());
            let probs = tz::softmax_rows(&scores);
            heads_out.push(tz::matmul(&probs, &cols(&v)));
        }
        let n = tokens.dim(0);
        let merged = Tensor::from_fn(&[n, dim], |i| {
            let (r, c) = (i / dim, i % dim);
            heads_out[c / dh].data()[r * dh + c % dh]
        });
        let want_tokens = lin(sra.proj.w, sra.proj.b, &merged);
        let want = tz::tokens_to_map(&want_tokens, 4, 3);
        assert!(got.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn sra_attention_rows_sum_to_one() {
        let mut params = Params::new();
        let mut rng = Rng::new(8);
        let sra = SpatialReductionAttention::new(&mut params, &mut rng, "sra", 12, 3, 2);
        let x = Tensor::from_fn(&[12, 6, 4], |_| rng.range_f64(-2.0, 2.0));
        let (probs, _) = sra.forward_map_with_probs(&params, &x).unwrap();
        for p in probs {
            for r in 0..p.dim(0) {
                let s: f64 = p.data()[r * p.dim(1)..(r + 1) * p.dim(1)].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sra_indivisible_reduction_rejected() {
        let mut params = Params::new();
        let mut rng = Rng::new(9);
        let sra = SpatialReductionAttention::new(&mut params, &mut rng, "sra", 8, 2, 4);
        let x = Tensor::from_fn(&[8, 6, 6], |_| rng.next_f64());
        assert!(sra.forward_map(&params, &x).is_err());
    }

    /// Finite-difference check of d(loss)/d(input) through the SRA layer.
    #[test]
    fn sra_gradient_matches_finite_differences() {
        let mut params = Params::new();
        let mut rng = Rng::new(10);
        let sra = SpatialReductionAttention::new(&mut params, &mut rng, "sra", 8, 2, 2);
        let x0 = Tensor::from_fn(&[8, 4, 4], |_| rng.range_f64(-1.0, 1.0));
        let run = |x: &Tensor, tape: &Tape| -> (Var, Var) {
            let sess = ParamSession::new(&params);
            let xv = tape.leaf(x.clone());
            let tokens = tape.map_to_tokens(&xv);
            let (out, _) = sra.forward_tokens(tape, &sess, &tokens, 4, 4);
            let sq = tape.mul(&out, &out);
            (xv, tape.mean_all(&sq))
        };
        let tape = Tape::new();
        let (xv, loss) = run(&x0, &tape);
        let grads = tape.backward(&loss);
        let analytic = grads.get(&xv).unwrap().clone();
        let f = |x: &Tensor| run(x, &Tape::inference()).1.value.data()[0];
        let fd = fd_grad(&f, &x0, 1e-3);
        let err = max_rel_err(&analytic, &fd);
        assert!(err <= 1e-4, "rel err {err}");
    }

    /// Shared weights mean identical inputs encode identically.
    #[test]
    fn identical_inputs_encode_identically() {
        let (_, params, enc) = toy_at(64);
        let img = rand_image(64, 11);
        let a = enc.encode(&params, &img).unwrap();
        let b = enc.encode(&params, &img.clone()).unwrap();
        for j in 0..4 {
            assert_eq!(a.scales[j], b.scales[j]);
        }
    }
}
