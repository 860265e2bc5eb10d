//! Weakly supervised segmentation by min-max uncertainty: a localizer
//! proposes a soft foreground mask, a classifier must be confident on the
//! foreground and maximally uncertain on the background, and log-barrier
//! terms keep the two regions from collapsing.

// `!(x > 0.0)` style checks deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod masking;
pub mod metrics;
pub mod nets;
pub mod objective;
pub mod pnm;
pub mod prob;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use config::{Ablation, RunConfig};
pub use error::{Error, Result};
pub use masking::{BinaryMask, MaskedImage, SoftMask};
pub use metrics::{Confusion, MetricsReport};
pub use nets::{ModelParams, NetConfig, PoolConfig};
pub use objective::{LossBreakdown, LossConfig};
pub use prob::{Posterior, RegMode};
pub use synthdata::{Dataset, GenConfig, LabeledImage, Split};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, OptimizerState};
