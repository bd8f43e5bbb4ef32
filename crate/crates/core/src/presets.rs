//! Named configurations: the small desk benchmark and the full-scale setting.

use crate::synth::{GapRange, ProfileConfig, SynthConfig};
use crate::train::TrainConfig;
use crate::types::{AttentionSource, AugmentConfig, ModelConfig};

pub const DESK_CLASSES: usize = 20;
pub const DESK_SITE_SIZE: usize = 10;
pub const DESK_SAMPLES: usize = 2000;
pub const DESK_SEQ_LEN: usize = 2000;
pub const DESK_EPOCHS: usize = 15;
pub const DESK_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Generator settings for the desk benchmark: two sites of ten pages each,
/// tab counts shaped like the reported test set.
pub fn desk_synth() -> SynthConfig {
    SynthConfig {
        class_count: DESK_CLASSES,
        samples: DESK_SAMPLES,
        seq_len: DESK_SEQ_LEN,
        tab_distribution: SynthConfig::reported_tab_shape(),
        gap_range: GapRange::default(),
        profile: ProfileConfig { site_size: DESK_SITE_SIZE, ..ProfileConfig::default() },
        open_world: false,
    }
}

/// Generator settings with `class_count` classes and `samples` sessions of length `seq_len`.
pub fn synth(class_count: usize, samples: usize, seq_len: usize) -> SynthConfig {
    SynthConfig { class_count, samples, seq_len, ..desk_synth() }
}

pub fn desk_model(class_count: usize) -> ModelConfig {
    ModelConfig {
        seq_len: DESK_SEQ_LEN,
        filters: vec![16, 32, 64, 128],
        kernel_sizes: vec![3; 4],
        pool_kernels: vec![9; 4],
        // The last pool keeps its length so the encoder sees 16 positions, as at full scale.
        pool_strides: vec![5, 5, 5, 1],
        attn_map_count: 8,
        attention_source: AttentionSource::Head,
        encoder_layers: 2,
        heads: 4,
        ffn_multiplier: 4,
        lambda: 0.3,
        class_count,
        leaky_slope: 0.01,
        scale_by_head_dim: false,
    }
}

pub fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: DESK_EPOCHS,
        batch_size: 32,
        learning_rate: 1e-3,
        seed,
        ablation: Default::default(),
        model: desk_model(DESK_CLASSES),
        augment: AugmentConfig { crop_dilation: 200, ..AugmentConfig::default() },
    }
}

pub fn full_scale_train(class_count: usize, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::new(ModelConfig::full_scale(class_count)) }
}
