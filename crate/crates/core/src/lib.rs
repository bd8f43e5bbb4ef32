//! Attention-driven multi-tab webpage fingerprinting.
//!
//! The crate covers the whole pipeline over Tor cell direction traces:
//!
//! - [`types`]: traces, label vectors, samples, datasets and model/augmentation configs.
//! - [`trace_io`]: JSON-lines and packed dataset files, seeded splits, monitored-set subsetting.
//! - [`synth`]: a synthetic multi-tab session generator with per-cell provenance.
//! - [`backbone`], [`encoder`], [`head`]: the 1D ResNet-12 feature extractor, the
//!   Transformer encoder and the class-specific residual attention head, all with
//!   hand-written backward passes on top of [`nn`].
//! - [`augment`]: attention cropping/masking and the random-augmentation baseline.
//! - [`train`]: BCE loss, Adam, the three-branch training loop and evaluation.
//! - [`metrics`]: Recall@k, AP@k and mAP.

pub mod augment;
pub mod backbone;
pub mod baseline;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod presets;
pub mod synth;
pub mod trace_io;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{Adwpf, MultiLabelModel};
pub use train::{AblationFlags, TrainConfig};
pub use types::{
    AugmentConfig, Dataset, DirectionTrace, LabelVector, ModelConfig, Sample,
};
