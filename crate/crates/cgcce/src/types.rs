//! Shared data model: samples, pyramids, confusion counts.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, STRIDES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary mask stored as one byte per pixel, values in {0,1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Mask> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("mask data {} != {h}x{w}", data.len())));
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        Ok(Mask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Mask {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Mask as a `[1,h,w]` float tensor for loss computation.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.h, self.w], self.data.iter().map(|&v| v as f64).collect())
    }
}

/// One co-registered image pair plus its change mask.
#[derive(Clone, Debug)]
pub struct BiTemporalSample {
    /// `[3,h,w]` image at time 1, values in [0,1].
    pub image_t1: Tensor,
    /// `[3,h,w]` image at time 2, values in [0,1].
    pub image_t2: Tensor,
    pub mask: Mask,
    pub id: String,
}

impl BiTemporalSample {
    pub fn validate(&self) -> Result<()> {
        for (name, img) in [("image_t1", &self.image_t1), ("image_t2", &self.image_t2)] {
            if img.rank() != 3 || img.dim(0) != 3 {
                return Err(Error::Shape(format!(
                    "{name} of {} must be [3,h,w], got {:?}",
                    self.id,
                    img.shape()
                )));
            }
            if img.dim(1) != self.mask.h || img.dim(2) != self.mask.w {
                return Err(Error::Shape(format!(
                    "{name} of {} is {}x{} but mask is {}x{}",
                    self.id,
                    img.dim(1),
                    img.dim(2),
                    self.mask.h,
                    self.mask.w
                )));
            }
            if !img.is_finite() {
                return Err(Error::Data(format!("{name} of {} has non-finite values", self.id)));
            }
        }
        if self.mask.h != self.mask.w {
            return Err(Error::Shape(format!(
                "sample {} tile must be square, got {}x{}",
                self.id, self.mask.h, self.mask.w
            )));
        }
        Ok(())
    }
}

/// Four feature maps at strides 4/8/16/32 of the input tile.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `[c_j, tile/stride_j, tile/stride_j]` per scale.
    pub scales: [Tensor; 4],
    pub strides: [usize; 4],
    pub channels: [usize; 4],
}

impl FeaturePyramid {
    pub fn new(scales: [Tensor; 4], channels: [usize; 4]) -> FeaturePyramid {
        FeaturePyramid { scales, strides: STRIDES, channels }
    }

    /// Stride/channel shape law; asserted in debug builds at boundaries.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for j in 0..4 {
            let expect = cfg.tile_size / STRIDES[j];
            let s = &self.scales[j];
            if s.rank() != 3 || s.dim(0) != cfg.stage_channels[j] || s.dim(1) != expect || s.dim(2) != expect {
                return Err(Error::Shape(format!(
                    "pyramid scale {j} has shape {:?}, expected [{}, {expect}, {expect}]",
                    s.shape(),
                    cfg.stage_channels[j]
                )));
            }
        }
        Ok(())
    }

    pub fn debug_validate(&self, cfg: &ModelConfig) {
        debug_assert!(self.validate(cfg).is_ok(), "{:?}", self.validate(cfg).err());
    }
}

/// Pixel-level confusion totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Shard counts combine by addition.
    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rejects_nonbinary() {
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
        assert!(Mask::new(1, 2, vec![0, 1]).is_ok());
        assert!(Mask::new(2, 2, vec![0, 1]).is_err());
    }

    #[test]
    fn pyramid_shape_law() {
        let cfg = ModelConfig::toy().with_tile(64);
        let scales = [
            Tensor::zeros(&[16, 16, 16]),
            Tensor::zeros(&[32, 8, 8]),
            Tensor::zeros(&[64, 4, 4]),
            Tensor::zeros(&[128, 2, 2]),
        ];
        let p = FeaturePyramid::new(scales, cfg.stage_channels);
        assert!(p.validate(&cfg).is_ok());
        let bad = FeaturePyramid::new(
            [
                Tensor::zeros(&[16, 16, 16]),
                Tensor::zeros(&[32, 8, 8]),
                Tensor::zeros(&[64, 4, 4]),
                Tensor::zeros(&[128, 2, 3]),
            ],
            cfg.stage_channels,
        );
        assert!(bad.validate(&cfg).is_err());
    }

    #[test]
    fn confusion_merge_adds() {
        let a = ConfusionCounts { tp: 1, fp: 2, fn_: 3, tn: 4 };
        let b = ConfusionCounts { tp: 10, fp: 20, fn_: 30, tn: 40 };
        assert_eq!(a.merge(&b), ConfusionCounts { tp: 11, fp: 22, fn_: 33, tn: 44 });
        assert_eq!(a.total(), 10);
    }
}
