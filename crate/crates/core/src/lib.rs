//! Infrared small-target segmentation: a reverse-mode autodiff engine, the
//! scale- and location-sensitive losses, a multi-scale U-Net, detection
//! metrics, a synthetic scene generator and the training harness.

pub mod tensor;
pub mod losses;
pub mod mshnet;
pub mod metrics;
pub mod synth_data;
pub mod harness;

pub use harness::{RunRecord, TrainConfig};
pub use losses::{Centroid, GroundTruthMask, LocationKind, LossBreakdown, LossKind, ScaleSet, SoftMask};
pub use metrics::{BinaryMask, EvalOptions, EvalReport};
pub use mshnet::{MshNet, MultiScaleOutputs, UNetConfig};
pub use synth_data::{Dataset, DatasetManifest, SceneConfig};
pub use tensor::{Tape, Tensor, Var};
