//! Analytic parameter and FLOP accounting.
//!
//! Walks the same component layout the model constructor builds, using
//! closed-form per-layer costs. Parameters count every trainable scalar
//! (weights, biases, norm affines). FLOPs count 2× the multiply-
//! accumulates of convolutions, linear maps, and attention products for
//! one forward pass of one bi-temporal pair — norms, activations, and
//! bias additions are excluded.

use crate::config::{ModelConfig, STRIDES};
use crate::error::Result;

const MLP_RATIO: usize = 4;
const KV_POOL: usize = 4;

/// `c_in -> c_out` k×k convolution parameters (weights + bias).
pub fn conv_params(c_in: usize, c_out: usize, k: usize, groups: usize) -> f64 {
    (c_out * (c_in / groups) * k * k + c_out) as f64
}

/// FLOPs of that convolution on an `h×w` output grid.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, groups: usize, h: usize, w: usize) -> f64 {
    2.0 * (h * w) as f64 * (c_out * (c_in / groups) * k * k) as f64
}

fn linear_params(c_in: usize, c_out: usize) -> f64 {
    (c_in * c_out + c_out) as f64
}

fn linear_flops(tokens: usize, c_in: usize, c_out: usize) -> f64 {
    2.0 * tokens as f64 * (c_in * c_out) as f64
}

fn norm_params(c: usize) -> f64 {
    (2 * c) as f64
}

/// Per-component cost line: (component, params, flops).
#[derive(Clone, Debug)]
pub struct CostReport {
    pub breakdown: Vec<(String, f64, f64)>,
}

impl CostReport {
    pub fn total_params(&self) -> f64 {
        self.breakdown.iter().map(|(_, p, _)| p).sum()
    }

    pub fn total_flops(&self) -> f64 {
        self.breakdown.iter().map(|(_, _, f)| f).sum()
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params() / 1e6
    }

    pub fn flops_giga(&self) -> f64 {
        self.total_flops() / 1e9
    }
}

fn encoder_cost(cfg: &ModelConfig) -> (f64, f64) {
    let mut params = 0.0;
    let mut flops = 0.0;
    let mut in_ch = 3usize;
    for j in 0..4 {
        let c = cfg.stage_channels[j];
        let side = cfg.tile_size / STRIDES[j];
        let tokens = side * side;
        let (k, _stride) = if j == 0 { (7, 4) } else { (3, 2) };
        params += conv_params(in_ch, c, k, 1) + norm_params(c);
        flops += conv_flops(in_ch, c, k, 1, side, side);
        let r = cfg.sra_reduction[j];
        let kv_tokens = (side / r) * (side / r);
        for _ in 0..cfg.stage_depths[j] {
            params += 2.0 * norm_params(c); // block norms
            params += 4.0 * linear_params(c, c); // q, k, v, proj
            flops += linear_flops(tokens, c, c); // q
            flops += 2.0 * linear_flops(kv_tokens, c, c); // k, v
            flops += linear_flops(tokens, c, c); // proj
            if r > 1 {
                params += conv_params(c, c, r, 1) + norm_params(c);
                flops += conv_flops(c, c, r, 1, side / r, side / r);
            }
            // attention products QKᵀ and AV
            flops += 2.0 * 2.0 * (tokens * kv_tokens * c) as f64;
            // feed-forward with depthwise positional conv
            let hidden = c * MLP_RATIO;
            params += linear_params(c, hidden) + conv_params(hidden, hidden, 3, hidden) + linear_params(hidden, c);
            flops += linear_flops(tokens, c, hidden)
                + conv_flops(hidden, hidden, 3, hidden, side, side)
                + linear_flops(tokens, hidden, c);
        }
        params += norm_params(c); // stage norm
        in_ch = c;
    }
    // weight sharing: parameters once, forward runs on both images
    (params, 2.0 * flops)
}

fn gccm_cost(cfg: &ModelConfig) -> (f64, f64) {
    let mut params = 0.0;
    let mut flops = 0.0;
    for j in 2..4 {
        let c = cfg.stage_channels[j];
        let side = cfg.tile_size / STRIDES[j];
        let tokens = side * side;
        let hidden = (c / 8).max(1);
        // channel gate bottleneck (shared by avg and max descriptors)
        params += linear_params(c, hidden) + linear_params(hidden, c);
        flops += 2.0 * 2.0 * (linear_flops(1, c, hidden) + linear_flops(1, hidden, c)) / 2.0;
        // spatial gate 7×7 conv, both branches
        params += conv_params(2, 1, 7, 1);
        flops += 2.0 * conv_flops(2, 1, 7, 1, side, side);
        // q/k/v projections on both branches
        params += 3.0 * linear_params(c, c);
        flops += 2.0 * 3.0 * linear_flops(tokens, c, c);
        // linear attention products KᵀV and Q(KᵀV), both directions
        let dh = c / cfg.attn_heads[j];
        flops += 2.0 * 2.0 * 2.0 * (tokens * c * dh) as f64;
    }
    (params, flops)
}

fn cgrr_cost(cfg: &ModelConfig) -> (f64, f64) {
    let mut params = 0.0;
    let mut flops = 0.0;
    for j in 0..4 {
        let c = cfg.stage_channels[j];
        let side = cfg.tile_size / STRIDES[j];
        params += 2.0 * (conv_params(c, c, 3, 1) + norm_params(c));
        flops += 2.0 * conv_flops(c, c, 3, 1, side, side);
        params += conv_params(c, 2 * c, 1, 1);
        flops += conv_flops(c, 2 * c, 1, 1, side, side);
        if j < 3 {
            let c_next = cfg.stage_channels[j + 1];
            let side_next = cfg.tile_size / STRIDES[j + 1];
            params += conv_params(c, c_next, 3, 1);
            flops += conv_flops(c, c_next, 3, 1, side_next, side_next);
        }
    }
    (params, flops)
}

fn scem_cost(cfg: &ModelConfig) -> (f64, f64) {
    let mut params = 0.0;
    let mut flops = 0.0;
    for j in 0..4 {
        let m = 2 * cfg.stage_channels[j];
        let side = cfg.tile_size / STRIDES[j];
        for &k in &cfg.scem_kernels {
            params += conv_params(m, m, k, m);
            flops += conv_flops(m, m, k, m, side, side);
        }
        params += 2.0 * conv_params(m, m, 1, 1); // agg + ctx
        flops += 2.0 * conv_flops(m, m, 1, 1, side, side);
    }
    (params, flops)
}

fn decoder_cost(cfg: &ModelConfig) -> (f64, f64) {
    let mut params = 0.0;
    let mut flops = 0.0;
    for j in 0..4 {
        let c = cfg.stage_channels[j];
        let side = cfg.tile_size / STRIDES[j];
        let tokens = side * side;
        params += conv_params(2 * c, c, 1, 1); // concat projection
        flops += conv_flops(2 * c, c, 1, 1, side, side);
        // cross fusion (always allocated; executed when enabled)
        params += 3.0 * linear_params(c, c) + conv_params(2 * c, c, 1, 1);
        // concat fallback (always allocated; executed when disabled)
        params += conv_params(2 * c, c, 1, 1);
        if cfg.enable_cfd {
            let pool = if j < 2 { KV_POOL } else { 1 };
            let kv_tokens = (side / pool) * (side / pool);
            flops += 2.0 * linear_flops(tokens, c, c); // queries both directions
            flops += 2.0 * 2.0 * linear_flops(kv_tokens, c, c); // k, v both directions
            flops += 2.0 * 2.0 * 2.0 * (tokens * kv_tokens * c) as f64; // QKᵀ, AV
            flops += conv_flops(2 * c, c, 1, 1, side, side); // reduce
        } else {
            flops += conv_flops(2 * c, c, 1, 1, side, side); // fallback reduce
        }
    }
    // reconstruction: aligns, two conv blocks, final logit projection
    for j in 0..3 {
        let side = cfg.tile_size / STRIDES[j];
        params += conv_params(cfg.stage_channels[j + 1], cfg.stage_channels[j], 1, 1);
        flops += conv_flops(cfg.stage_channels[j + 1], cfg.stage_channels[j], 1, 1, side, side);
    }
    let c1 = cfg.stage_channels[0];
    let side0 = cfg.tile_size / STRIDES[0];
    params += 2.0 * conv_params(c1, c1, 3, 1);
    flops += 2.0 * conv_flops(c1, c1, 3, 1, side0, side0);
    params += conv_params(c1, 1, 1, 1);
    flops += conv_flops(c1, 1, 1, 1, cfg.tile_size, cfg.tile_size);
    (params, flops)
}

/// Parameter count (millions) and forward FLOPs (billions) for one
/// bi-temporal pair at the configured tile size.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut breakdown = Vec::new();
    let (p, f) = encoder_cost(cfg);
    breakdown.push(("encoder".to_string(), p, f));
    let (p, f) = gccm_cost(cfg);
    breakdown.push(("gccm".to_string(), p, if cfg.enable_gccm { f } else { 0.0 }));
    let (p, f) = cgrr_cost(cfg);
    breakdown.push(("cgrr".to_string(), p, if cfg.enable_cgrr { f } else { 0.0 }));
    let (p, f) = scem_cost(cfg);
    breakdown.push(("scem".to_string(), p, if cfg.enable_scem { f } else { 0.0 }));
    let (p, f) = decoder_cost(cfg);
    breakdown.push(("decoder".to_string(), p, f));
    Ok(CostReport { breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::CgcceModel;

    #[test]
    fn lone_conv_closed_form() {
        assert_eq!(conv_params(16, 32, 3, 1), (16 * 32 * 9 + 32) as f64);
        assert_eq!(conv_flops(16, 32, 3, 1, 8, 8), 2.0 * 64.0 * (16 * 32 * 9) as f64);
    }

    /// Analytic parameter count equals the allocated store exactly.
    #[test]
    fn analytic_params_match_allocation() {
        for cfg in [ModelConfig::toy(), {
            let mut c = ModelConfig::toy().with_tile(64);
            c.stage_channels = [8, 12, 16, 24];
            c.stage_depths = [2, 1, 3, 1];
            c.attn_heads = [1, 2, 4, 8];
            c.sra_reduction = [4, 2, 2, 1];
            c
        }] {
            let report = count_params_flops(&cfg).unwrap();
            let (_, params) = CgcceModel::new(&cfg, 0).unwrap();
            assert_eq!(
                report.total_params(),
                params.total_scalars() as f64,
                "config {:?}",
                cfg.stage_channels
            );
        }
    }

    /// Doubling every stage width roughly quadruples encoder parameters.
    #[test]
    fn quadratic_width_scaling() {
        let base = ModelConfig::toy();
        let mut doubled = ModelConfig::toy();
        doubled.stage_channels = [32, 64, 128, 256];
        let (p1, _) = encoder_cost(&base);
        let (p2, _) = encoder_cost(&doubled);
        let ratio = p2 / p1;
        assert!((ratio - 4.0).abs() / 4.0 < 0.10, "ratio {ratio}");
    }

    #[test]
    fn full_config_reportable() {
        let report = count_params_flops(&ModelConfig::full()).unwrap();
        let params_m = report.params_millions();
        let flops_g = report.flops_giga();
        assert!(params_m > 10.0 && params_m < 200.0, "params {params_m} M");
        assert!(flops_g > 1.0 && flops_g < 200.0, "flops {flops_g} G");
    }
}
