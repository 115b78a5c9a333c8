//! CGCCE: a siamese pyramid change-detection network with change-guided
//! refinement, linear-angle cross correlation, semantic enhancement, and
//! cross-fusion decoding — plus the training, evaluation, and synthetic
//! data tooling needed to exercise it end to end on a CPU.
//!
//! The numerical core is a small f64 tape-based autodiff engine
//! ([`autodiff`]) over dense tensors ([`tensor`]). Model components live
//! in [`encoder`], [`gccm`], [`cgrr`], [`scem`], and [`decoder`]; the
//! assembled network is [`decoder::CgcceModel`]. Training and evaluation
//! live in [`train`], dataset tooling in [`data`] and [`synth`].

pub mod autodiff;
pub mod cgrr;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gccm;
pub mod metrics;
pub mod flops;
pub mod nn;
pub mod rng;
pub mod scem;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;

pub use config::{validate_config, ModelConfig};
pub use data::DatasetManifest;
pub use decoder::CgcceModel;
pub use error::{Error, Result};
pub use metrics::{bce_loss, confusion, metrics, MetricReport};
pub use synth::{synth_generate, SynthSpec};
pub use tensor::Tensor;
pub use train::{ablate, cosine_lr, evaluate, train, Checkpoint, TrainOpts};
pub use types::{BiTemporalSample, ConfusionCounts, FeaturePyramid, Mask};
