//! Cross-fusion decoding and the assembled change-detection model.
//!
//! Per scale, the difference branch and the (projected) concatenation
//! branch exchange information through bidirectional softmax cross
//! attention; a top-down pathway then rebuilds full-resolution change
//! logits. The [`CgcceModel`] here owns every component and implements
//! the end-to-end forward with per-component bypass flags.

use crate::autodiff::{Tape, Var};
use crate::cgrr::{fuse_pair_vars, ChangeGuidedRefinement};
use crate::config::{ModelConfig, STRIDES};
use crate::encoder::PvtEncoder;
use crate::error::{Error, Result};
use crate::gccm::GlobalCrossCorrelation;
use crate::nn::{multi_head_attention, Conv2d, Linear, ParamSession, Params};
use crate::rng::Rng;
use crate::scem::SemanticEnhancement;
use crate::tensor::Tensor;
use crate::types::{BiTemporalSample, FeaturePyramid, Mask};

/// Keys/values of the shallow two scales are average-pooled by this
/// factor per side to bound the attention cost.
const KV_POOL: usize = 4;

/// Fixed gain on the features entering the logit projection. Sharpens
/// the effective sigmoid so the head reaches confident predictions
/// within short training budgets; zero input still maps to the bias.
const LOGIT_GAIN: f64 = 5.0;

/// Initial logit bias. Change masks are sparse, so the head starts from
/// a low positive rate instead of spending optimizer steps learning it.
const LOGIT_PRIOR_BIAS: f64 = -2.0;

/// Bidirectional cross attention between two same-shape maps.
#[derive(Clone, Debug)]
pub struct CrossFusion {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub reduce: Conv2d,
    pub heads: usize,
    pub dim: usize,
    /// Average-pool factor applied to the key/value source map.
    pub kv_pool: usize,
}

impl CrossFusion {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, dim: usize, heads: usize, kv_pool: usize) -> Self {
        CrossFusion {
            q: Linear::new(params, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(params, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(params, rng, &format!("{name}.v"), dim, dim),
            reduce: Conv2d::new(params, rng, &format!("{name}.reduce"), 2 * dim, dim, 1, 1, 0, 1),
            heads,
            dim,
            kv_pool,
        }
    }

    fn kv_tokens(&self, tape: &Tape, sess: &ParamSession, m: &Var) -> (Var, Var) {
        let src = if self.kv_pool > 1 { tape.avg_pool2d(m, self.kv_pool) } else { m.clone() };
        let toks = tape.map_to_tokens(&src);
        (self.k.forward(tape, sess, &toks), self.v.forward(tape, sess, &toks))
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, a: &Var, b: &Var) -> Var {
        self.forward_with_probs(tape, sess, a, b).0
    }

    /// Returns the fused map plus all attention probability matrices.
    pub fn forward_with_probs(
        &self,
        tape: &Tape,
        sess: &ParamSession,
        a: &Var,
        b: &Var,
    ) -> (Var, Vec<Tensor>) {
        let (h, w) = (a.value.dim(1), a.value.dim(2));
        let tok_a = tape.map_to_tokens(a);
        let tok_b = tape.map_to_tokens(b);
        let qa = self.q.forward(tape, sess, &tok_a);
        let qb = self.q.forward(tape, sess, &tok_b);
        let (kb, vb) = self.kv_tokens(tape, sess, b);
        let (ka, va) = self.kv_tokens(tape, sess, a);
        let (out_ab, mut probs) = multi_head_attention(tape, &qa, &kb, &vb, self.heads);
        let (out_ba, probs2) = multi_head_attention(tape, &qb, &ka, &va, self.heads);
        probs.extend(probs2);
        let map_ab = tape.tokens_to_map(&out_ab, h, w);
        let map_ba = tape.tokens_to_map(&out_ba, h, w);
        let cat = tape.concat_channels(&map_ab, &map_ba);
        let attended = self.reduce.forward(tape, sess, &cat);
        // residual skip keeps the spatial signal flowing before the
        // attention projections have learned anything
        let skip = tape.scale(&tape.add(a, b), 0.5);
        (tape.add(&attended, &skip), probs)
    }

    /// Map-level forward for contract checks.
    pub fn forward_maps(&self, store: &Params, a: &Tensor, b: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "cross-fusion inputs differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if a.rank() != 3 || a.dim(0) != self.dim {
            return Err(Error::Shape(format!(
                "cross-fusion input must be [{}, h, w], got {:?}",
                self.dim,
                a.shape()
            )));
        }
        if self.kv_pool > 1 && (a.dim(1) % self.kv_pool != 0 || a.dim(2) % self.kv_pool != 0) {
            return Err(Error::Shape(format!(
                "cross-fusion grid {}x{} not divisible by kv pool {}",
                a.dim(1),
                a.dim(2),
                self.kv_pool
            )));
        }
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let (out, probs) = self.forward_with_probs(&tape, &sess, &av, &bv);
        Ok((out.value, probs))
    }
}

/// Top-down aggregation and full-resolution logit reconstruction.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    /// 1×1 channel alignment from scale j+1 down to scale j.
    pub aligns: Vec<Conv2d>,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub final_proj: Conv2d,
    pub channels: [usize; 4],
}

impl ReconstructionHead {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, channels: [usize; 4]) -> Self {
        let aligns = (0..3)
            .map(|j| {
                Conv2d::new(params, rng, &format!("{name}.align{j}"), channels[j + 1], channels[j], 1, 1, 0, 1)
            })
            .collect();
        let c1 = channels[0];
        let head = ReconstructionHead {
            aligns,
            conv1: Conv2d::new(params, rng, &format!("{name}.conv1"), c1, c1, 3, 1, 1, 1),
            conv2: Conv2d::new(params, rng, &format!("{name}.conv2"), c1, c1, 3, 1, 1, 1),
            final_proj: Conv2d::new(params, rng, &format!("{name}.logit"), c1, 1, 1, 1, 0, 1),
            channels,
        };
        params.set(head.final_proj.b, crate::tensor::Tensor::full(&[1], LOGIT_PRIOR_BIAS));
        head
    }

    pub fn forward(&self, tape: &Tape, sess: &ParamSession, fused: &[Var; 4]) -> Var {
        let mut acc = fused[3].clone();
        for j in (0..3).rev() {
            let up = tape.upsample_bilinear(&acc, 2);
            let aligned = self.aligns[j].forward(tape, sess, &up);
            acc = tape.add(&aligned, &fused[j]);
        }
        let x = tape.relu(&self.conv1.forward(tape, sess, &acc));
        let x = tape.relu(&self.conv2.forward(tape, sess, &x));
        let x = tape.upsample_bilinear(&x, 4);
        let x = tape.scale(&x, LOGIT_GAIN);
        self.final_proj.forward(tape, sess, &x)
    }

    /// Map-level forward for contract checks; validates scale alignment.
    pub fn forward_maps(&self, store: &Params, fused: &[Tensor; 4]) -> Result<Tensor> {
        let base = fused[0].dim(1);
        for (j, f) in fused.iter().enumerate() {
            let expect = base * STRIDES[0] / STRIDES[j];
            if f.rank() != 3 || f.dim(0) != self.channels[j] || f.dim(1) != expect || f.dim(2) != expect {
                return Err(Error::Shape(format!(
                    "fused map {j} has shape {:?}, expected [{}, {expect}, {expect}]",
                    f.shape(),
                    self.channels[j]
                ))
                .at_scale(j + 1));
            }
        }
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let vars: Vec<Var> = fused.iter().map(|f| tape.leaf(f.clone())).collect();
        let arr: [Var; 4] = vars.try_into().unwrap_or_else(|_| unreachable!());
        Ok(self.forward(&tape, &sess, &arr).value)
    }
}

/// Per-scale difference maps as they enter the decoder, for invariant
/// checks and visual debugging.
pub struct ForwardDiagnostics {
    pub diffs: [Tensor; 4],
    pub logits: Tensor,
}

/// The assembled network.
pub struct CgcceModel {
    pub cfg: ModelConfig,
    pub encoder: PvtEncoder,
    pub gccm: Vec<GlobalCrossCorrelation>,
    pub cgrr: ChangeGuidedRefinement,
    pub scem: Vec<SemanticEnhancement>,
    pub concat_proj: Vec<Conv2d>,
    pub cross_fuse: Vec<CrossFusion>,
    pub concat_fallback: Vec<Conv2d>,
    pub recon: ReconstructionHead,
}

impl CgcceModel {
    /// Build the model and its parameter store from a validated config.
    /// All components are always constructed — ablation flags only bypass
    /// them in the forward pass — so a given seed yields the same
    /// initialization for every flag combination.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(CgcceModel, Params)> {
        cfg.validate()?;
        let mut params = Params::new();
        let mut rng = Rng::new(seed);
        let encoder = PvtEncoder::new(&mut params, &mut rng, cfg);
        let gccm = (2..4)
            .map(|j| {
                GlobalCrossCorrelation::new(
                    &mut params,
                    &mut rng,
                    &format!("gccm.s{j}"),
                    cfg.stage_channels[j],
                    cfg.attn_heads[j],
                )
            })
            .collect();
        let cgrr = ChangeGuidedRefinement::new(&mut params, &mut rng, "cgrr", cfg.stage_channels);
        let scem = (0..4)
            .map(|j| {
                SemanticEnhancement::new(
                    &mut params,
                    &mut rng,
                    &format!("scem.s{j}"),
                    2 * cfg.stage_channels[j],
                    &cfg.scem_kernels,
                )
            })
            .collect();
        let concat_proj = (0..4)
            .map(|j| {
                Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("dec.bproj{j}"),
                    2 * cfg.stage_channels[j],
                    cfg.stage_channels[j],
                    1,
                    1,
                    0,
                    1,
                )
            })
            .collect();
        let cross_fuse = (0..4)
            .map(|j| {
                CrossFusion::new(
                    &mut params,
                    &mut rng,
                    &format!("dec.cf{j}"),
                    cfg.stage_channels[j],
                    cfg.attn_heads[j],
                    if j < 2 { KV_POOL } else { 1 },
                )
            })
            .collect();
        let concat_fallback = (0..4)
            .map(|j| {
                Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("dec.catred{j}"),
                    2 * cfg.stage_channels[j],
                    cfg.stage_channels[j],
                    1,
                    1,
                    0,
                    1,
                )
            })
            .collect();
        let recon = ReconstructionHead::new(&mut params, &mut rng, "dec.recon", cfg.stage_channels);
        Ok((
            CgcceModel {
                cfg: cfg.clone(),
                encoder,
                gccm,
                cgrr,
                scem,
                concat_proj,
                cross_fuse,
                concat_fallback,
                recon,
            },
            params,
        ))
    }

    /// Flip the component-bypass flags (parameters are untouched).
    pub fn set_flags(&mut self, gccm: bool, cgrr: bool, scem: bool, cfd: bool) {
        self.cfg.enable_gccm = gccm;
        self.cfg.enable_cgrr = cgrr;
        self.cfg.enable_scem = scem;
        self.cfg.enable_cfd = cfd;
    }

    /// Tape-level end-to-end forward. Returns the logits and the
    /// difference maps that entered the decoder.
    pub fn forward(&self, tape: &Tape, sess: &ParamSession, img1: &Var, img2: &Var) -> (Var, [Var; 4]) {
        let p1 = self.encoder.forward(tape, sess, img1);
        let p2 = self.encoder.forward(tape, sess, img2);
        debug_assert!({
            let pyr = FeaturePyramid::new(
                std::array::from_fn(|j| p1[j].value.clone()),
                self.cfg.stage_channels,
            );
            pyr.validate(&self.cfg).is_ok()
        });

        let mut diffs: Vec<Var> = Vec::with_capacity(4);
        let mut concats: Vec<Var> = Vec::with_capacity(4);
        for j in 0..4 {
            let (d, c) = fuse_pair_vars(tape, &p1[j], &p2[j]);
            diffs.push(d);
            concats.push(c);
        }

        if self.cfg.enable_cgrr {
            let feedback = self.cgrr.forward(tape, sess, &p1[0]);
            for j in 0..4 {
                concats[j] = tape.add(&concats[j], &feedback[j]);
            }
        }

        if self.cfg.enable_gccm {
            for (gi, j) in (2..4).enumerate() {
                let (h1, h2) = self.gccm[gi].forward(tape, sess, &p1[j], &p2[j]);
                let delta = tape.abs(&tape.sub(&h1, &h2));
                diffs[j] = tape.add(&diffs[j], &delta);
            }
        }

        if self.cfg.enable_scem {
            for j in 0..4 {
                concats[j] = self.scem[j].forward(tape, sess, &concats[j]);
            }
        }

        let mut fused: Vec<Var> = Vec::with_capacity(4);
        for j in 0..4 {
            let b = self.concat_proj[j].forward(tape, sess, &concats[j]);
            let f = if self.cfg.enable_cfd {
                self.cross_fuse[j].forward(tape, sess, &diffs[j], &b)
            } else {
                let cat = tape.concat_channels(&diffs[j], &b);
                self.concat_fallback[j].forward(tape, sess, &cat)
            };
            fused.push(f);
        }
        let fused: [Var; 4] = fused.try_into().unwrap_or_else(|_| unreachable!());
        let logits = self.recon.forward(tape, sess, &fused);
        let diffs: [Var; 4] = diffs.try_into().unwrap_or_else(|_| unreachable!());
        (logits, diffs)
    }

    fn check_pair(&self, img1: &Tensor, img2: &Tensor) -> Result<()> {
        self.encoder.check_input(img1)?;
        self.encoder.check_input(img2)?;
        if img1.shape() != img2.shape() {
            return Err(Error::Shape(format!(
                "image pair shapes differ: {:?} vs {:?}",
                img1.shape(),
                img2.shape()
            )));
        }
        Ok(())
    }

    /// Full-resolution change logits for one sample.
    pub fn full_forward(&self, store: &Params, sample: &BiTemporalSample) -> Result<Tensor> {
        sample.validate()?;
        Ok(self.full_forward_images(store, &sample.image_t1, &sample.image_t2)?.logits)
    }

    /// Forward from raw image tensors, returning diagnostics.
    pub fn full_forward_images(&self, store: &Params, img1: &Tensor, img2: &Tensor) -> Result<ForwardDiagnostics> {
        self.check_pair(img1, img2)?;
        let tape = Tape::inference();
        let sess = ParamSession::new(store);
        let v1 = tape.leaf(img1.clone());
        let v2 = tape.leaf(img2.clone());
        let (logits, diffs) = self.forward(&tape, &sess, &v1, &v2);
        Ok(ForwardDiagnostics {
            diffs: std::array::from_fn(|j| diffs[j].value.clone()),
            logits: logits.value,
        })
    }

    /// Binarized change prediction at the configured threshold.
    pub fn predict_mask(&self, store: &Params, img1: &Tensor, img2: &Tensor) -> Result<Mask> {
        let diag = self.full_forward_images(store, img1, img2)?;
        let (h, w) = (diag.logits.dim(1), diag.logits.dim(2));
        let data = diag
            .logits
            .data()
            .iter()
            .map(|&z| {
                let p = 1.0 / (1.0 + (-z).exp());
                u8::from(p > self.cfg.threshold)
            })
            .collect();
        Mask::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{fd_grad, max_rel_err};
    use crate::config::validate_config;

    fn small_cfg(tile: usize) -> ModelConfig {
        let mut cfg = ModelConfig::toy().with_tile(tile);
        cfg.stage_channels = [8, 12, 16, 24];
        cfg.stage_depths = [1, 1, 1, 1];
        cfg.attn_heads = [1, 2, 4, 8];
        cfg.sra_reduction = [4, 2, 2, 1];
        validate_config(cfg).unwrap()
    }

    fn rand_image(side: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[3, side, side], |_| rng.next_f64())
    }

    #[test]
    fn cross_fusion_shape_and_rows() {
        let mut params = Params::new();
        let mut rng = Rng::new(50);
        let cf = CrossFusion::new(&mut params, &mut rng, "cf", 8, 2, 4);
        let a = Tensor::from_fn(&[8, 8, 8], |_| rng.range_f64(-1.0, 1.0));
        let b = Tensor::from_fn(&[8, 8, 8], |_| rng.range_f64(-1.0, 1.0));
        let (out, probs) = cf.forward_maps(&params, &a, &b).unwrap();
        assert_eq!(out.shape(), a.shape());
        assert!(!probs.is_empty());
        for p in probs {
            for r in 0..p.dim(0) {
                let s: f64 = p.data()[r * p.dim(1)..(r + 1) * p.dim(1)].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_fusion_gradient() {
        let mut params = Params::new();
        let mut rng = Rng::new(51);
        let cf = CrossFusion::new(&mut params, &mut rng, "cf", 6, 2, 1);
        let b = Tensor::from_fn(&[6, 4, 4], |_| rng.range_f64(-1.0, 1.0));
        let x0 = Tensor::from_fn(&[6, 4, 4], |_| rng.range_f64(-1.0, 1.0));
        let run = |x: &Tensor, tape: &Tape| -> (Var, Var) {
            let sess = ParamSession::new(&params);
            let xv = tape.leaf(x.clone());
            let bv = tape.leaf(b.clone());
            let out = cf.forward(tape, &sess, &xv, &bv);
            let sq = tape.mul(&out, &out);
            (xv, tape.mean_all(&sq))
        };
        let tape = Tape::new();
        let (xv, loss) = run(&x0, &tape);
        let grads = tape.backward(&loss);
        let fd = fd_grad(&|x| run(x, &Tape::inference()).1.value.data()[0], &x0, 1e-3);
        let err = max_rel_err(grads.get(&xv).unwrap(), &fd);
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn reconstruct_full_resolution() {
        let cfg = validate_config(ModelConfig::toy()).unwrap();
        let (model, params) = CgcceModel::new(&cfg, 7).unwrap();
        let mut rng = Rng::new(52);
        let fused: [Tensor; 4] = std::array::from_fn(|j| {
            let side = 256 / STRIDES[j];
            Tensor::from_fn(&[cfg.stage_channels[j], side, side], |_| rng.range_f64(-0.1, 0.1))
        });
        let logits = model.recon.forward_maps(&params, &fused).unwrap();
        assert_eq!(logits.shape(), &[1, 256, 256]);
        assert!(logits.is_finite());
    }

    #[test]
    fn reconstruct_zero_input_gives_bias_plane() {
        let cfg = small_cfg(64);
        let (model, mut params) = CgcceModel::new(&cfg, 8).unwrap();
        let bias_val = 0.37;
        params.set(model.recon.final_proj.b, Tensor::full(&[1], bias_val));
        let fused: [Tensor; 4] = std::array::from_fn(|j| {
            let side = 64 / STRIDES[j];
            Tensor::zeros(&[cfg.stage_channels[j], side, side])
        });
        let logits = model.recon.forward_maps(&params, &fused).unwrap();
        for &v in logits.data() {
            assert!((v - bias_val).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruct_gradient() {
        let cfg = small_cfg(32);
        let (model, mut params) = CgcceModel::new(&cfg, 9).unwrap();
        crate::nn::set_norm_offsets(&mut params, 1.0);
        let mut rng = Rng::new(53);
        let rest: [Tensor; 4] = std::array::from_fn(|j| {
            let side = 32 / STRIDES[j];
            Tensor::from_fn(&[cfg.stage_channels[j], side, side], |_| rng.range_f64(-1.0, 1.0))
        });
        let x0 = rest[0].clone();
        let run = |x: &Tensor, tape: &Tape| -> (Var, Var) {
            let sess = ParamSession::new(&params);
            let xv = tape.leaf(x.clone());
            let fused = [
                xv.clone(),
                tape.leaf(rest[1].clone()),
                tape.leaf(rest[2].clone()),
                tape.leaf(rest[3].clone()),
            ];
            let out = model.recon.forward(tape, &sess, &fused);
            let sq = tape.mul(&out, &out);
            (xv, tape.mean_all(&sq))
        };
        let tape = Tape::new();
        let (xv, loss) = run(&x0, &tape);
        let grads = tape.backward(&loss);
        let fd = fd_grad(&|x| run(x, &Tape::inference()).1.value.data()[0], &x0, 1e-3);
        let err = max_rel_err(grads.get(&xv).unwrap(), &fd);
        assert!(err <= 1e-4, "rel err {err}");
    }

    /// Identical input pairs produce exactly-zero difference maps at
    /// every scale, before any training.
    #[test]
    fn identity_pair_zero_diffs() {
        let cfg = small_cfg(64);
        let (model, params) = CgcceModel::new(&cfg, 10).unwrap();
        let img = rand_image(64, 54);
        let diag = model.full_forward_images(&params, &img, &img.clone()).unwrap();
        for (j, d) in diag.diffs.iter().enumerate() {
            assert!(d.data().iter().all(|&v| v == 0.0), "scale {j} diff non-zero");
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = small_cfg(64);
        let (model, params) = CgcceModel::new(&cfg, 11).unwrap();
        let a = rand_image(64, 55);
        let b = rand_image(64, 56);
        let d1 = model.full_forward_images(&params, &a, &b).unwrap();
        let d2 = model.full_forward_images(&params, &a, &b).unwrap();
        assert_eq!(d1.logits.shape(), &[1, 64, 64]);
        assert_eq!(d1.logits, d2.logits);
    }

    /// Each bypass flag changes the output on random inputs.
    #[test]
    fn ablation_flags_change_output() {
        let cfg = small_cfg(64);
        let a = rand_image(64, 57);
        let b = rand_image(64, 58);
        let run = |flags: (bool, bool, bool, bool)| {
            let (mut model, params) = CgcceModel::new(&cfg, 12).unwrap();
            model.set_flags(flags.0, flags.1, flags.2, flags.3);
            model.full_forward_images(&params, &a, &b).unwrap().logits
        };
        let full = run((true, true, true, true));
        for (i, flags) in [
            (false, true, true, true),
            (true, false, true, true),
            (true, true, false, true),
            (true, true, true, false),
        ]
        .iter()
        .enumerate()
        {
            let ablated = run(*flags);
            let delta = full.max_abs_diff(&ablated);
            assert!(delta > 0.0, "flag {i} did not change the output");
        }
    }

    #[test]
    fn mismatched_pair_rejected() {
        let cfg = small_cfg(64);
        let (model, params) = CgcceModel::new(&cfg, 13).unwrap();
        let a = rand_image(64, 59);
        let b = rand_image(32, 60);
        assert!(model.full_forward_images(&params, &a, &b).is_err());
    }
}
