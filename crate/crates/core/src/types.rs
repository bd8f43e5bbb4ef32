//! Shared data model: traces, labels, samples, datasets and configuration records.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default input length used throughout the full-scale configuration.
pub const DEFAULT_SEQ_LEN: usize = 10_000;

/// Fixed-length signed direction sequence: +1 outgoing, -1 incoming, 0 padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DirectionTrace {
    values: Vec<i8>,
    true_length: usize,
}

impl DirectionTrace {
    /// Copies the first `min(len(raw), len)` cells of `raw` and zero-pads the rest.
    pub fn pad_or_truncate(raw: &[i8], len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("trace length must be positive".into()));
        }
        if raw.is_empty() {
            return Err(Error::EmptyTrace);
        }
        if let Some((position, &value)) =
            raw.iter().enumerate().find(|(_, v)| **v != 1 && **v != -1)
        {
            return Err(Error::InvalidDirection {
                position,
                value: value as i64,
            });
        }
        let true_length = raw.len().min(len);
        let mut values = vec![0i8; len];
        values[..true_length].copy_from_slice(&raw[..true_length]);
        Ok(Self {
            values,
            true_length,
        })
    }

    /// Builds a trace from already-padded values, checking every invariant.
    pub fn from_parts(values: Vec<i8>, true_length: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyTrace);
        }
        if true_length > values.len() {
            return Err(Error::InvalidTrace(format!(
                "true_length {true_length} exceeds length {}",
                values.len()
            )));
        }
        if let Some((position, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !matches!(**v, -1..=1))
        {
            return Err(Error::InvalidDirection {
                position,
                value: value as i64,
            });
        }
        if let Some(pos) = values[true_length..].iter().position(|v| *v != 0) {
            return Err(Error::InvalidTrace(format!(
                "non-zero value in padding at position {}",
                true_length + pos
            )));
        }
        Ok(Self {
            values,
            true_length,
        })
    }

    /// Wraps values in {-1, 0, +1}; `true_length` becomes one past the last non-zero cell.
    ///
    /// Used for augmented traces, which may contain interior zeros.
    pub fn from_values(values: Vec<i8>) -> Result<Self> {
        let true_length = values.iter().rposition(|v| *v != 0).map_or(0, |p| p + 1);
        Self::from_parts(values, true_length)
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    /// The unpadded prefix.
    pub fn active(&self) -> &[i8] {
        &self.values[..self.true_length]
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0).count()
    }
}

/// Multi-hot vector over the dataset's webpage classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    bits: Vec<u8>,
}

impl LabelVector {
    /// `bits[j] = 1` iff `j` is in `label_ids`.
    pub fn encode<I>(label_ids: I, class_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut bits = vec![0u8; class_count];
        for id in label_ids {
            if id >= class_count {
                return Err(Error::LabelOutOfRange { id, class_count });
            }
            bits[id] = 1;
        }
        Ok(Self { bits })
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|b| **b > 1) {
            return Err(Error::Dataset(format!("label bit {b} is not binary")));
        }
        Ok(Self { bits })
    }

    /// Indices of the set bits, ascending.
    pub fn decode(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| (*b == 1).then_some(i))
            .collect()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn class_count(&self) -> usize {
        self.bits.len()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.bits.get(class).is_some_and(|b| *b == 1)
    }
}

/// `encode_labels` as a free function.
pub fn encode_labels<I>(label_ids: I, class_count: usize) -> Result<LabelVector>
where
    I: IntoIterator<Item = usize>,
{
    LabelVector::encode(label_ids, class_count)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub trace: DirectionTrace,
    pub labels: LabelVector,
    /// Number of pages loaded in the session.
    pub tab_count: usize,
}

/// Name given to the reserved open-world class.
pub const UNMONITORED_CLASS: &str = "unmonitored";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    pub meta: serde_json::Value,
}

impl Dataset {
    /// Validates that all samples share one class count and one trace length and
    /// that ids are unique.
    pub fn new(
        samples: Vec<Sample>,
        class_names: Vec<String>,
        meta: serde_json::Value,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let class_count = class_names.len();
        let seq_len = samples[0].trace.len();
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.labels.class_count() != class_count {
                return Err(Error::Dataset(format!(
                    "sample {} has {} classes, dataset has {class_count}",
                    s.id,
                    s.labels.class_count()
                )));
            }
            if s.trace.len() != seq_len {
                return Err(Error::Dataset(format!(
                    "sample {} has length {}, expected {seq_len}",
                    s.id,
                    s.trace.len()
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            samples,
            class_names,
            meta,
        })
    }

    /// Default class names `page-0 .. page-{n-1}`.
    pub fn default_class_names(class_count: usize) -> Vec<String> {
        (0..class_count).map(|i| format!("page-{i}")).collect()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn seq_len(&self) -> usize {
        self.samples[0].trace.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A dataset restricted to the given sample indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples, self.class_names.clone(), self.meta.clone())
    }
}

/// Which tensor the augmentation attention maps are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// A dedicated 1x1 convolution with `attn_map_count` output channels.
    Head,
    /// The final stage's own channels after a ReLU; `attn_map_count` must equal C.
    RawChannels,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub pool_kernels: Vec<usize>,
    pub pool_strides: Vec<usize>,
    pub attn_map_count: usize,
    pub attention_source: AttentionSource,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub lambda: f64,
    pub class_count: usize,
    pub leaky_slope: f64,
    /// Divide attention logits by sqrt(C / h) instead of sqrt(C).
    pub scale_by_head_dim: bool,
}

impl ModelConfig {
    /// Full-scale settings: L=10000, filters [64,160,320,640], kernels 3, pools 9/5,
    /// 4 encoder layers with 8 heads, lambda 0.3.
    pub fn full_scale(class_count: usize) -> Self {
        Self {
            seq_len: DEFAULT_SEQ_LEN,
            filters: vec![64, 160, 320, 640],
            kernel_sizes: vec![3; 4],
            pool_kernels: vec![9; 4],
            pool_strides: vec![5; 4],
            attn_map_count: 32,
            attention_source: AttentionSource::Head,
            encoder_layers: 4,
            heads: 8,
            ffn_multiplier: 4,
            lambda: 0.3,
            class_count,
            leaky_slope: 0.01,
            scale_by_head_dim: false,
        }
    }

    /// Output length after one padded max-pool (padding = kernel / 2).
    pub fn pooled_len(len: usize, kernel: usize, stride: usize) -> usize {
        let pad = kernel / 2;
        (len + 2 * pad - kernel) / stride + 1
    }

    /// Per-stage input lengths, followed by the final feature length M.
    pub fn stage_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.seq_len];
        for (k, s) in self.pool_kernels.iter().zip(&self.pool_strides) {
            let last = *lens.last().unwrap();
            lens.push(Self::pooled_len(last, *k, *s));
        }
        lens
    }

    /// Feature-map length M.
    pub fn feature_len(&self) -> usize {
        *self.stage_lengths().last().unwrap()
    }

    /// Feature-map width C.
    pub fn channels(&self) -> usize {
        *self.filters.last().unwrap_or(&0)
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.channels() * self.ffn_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 {
            return fail("seq_len must be positive".into());
        }
        let n = self.filters.len();
        if n == 0 {
            return fail("at least one residual stage is required".into());
        }
        if self.kernel_sizes.len() != n || self.pool_kernels.len() != n || self.pool_strides.len() != n
        {
            return fail(format!(
                "filters, kernel_sizes, pool_kernels and pool_strides must all have {n} entries"
            ));
        }
        if self.filters.iter().any(|f| *f == 0) {
            return fail("filter counts must be positive".into());
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return fail("convolution kernels must be odd for same padding".into());
        }
        if self.pool_kernels.iter().any(|k| *k == 0) || self.pool_strides.iter().any(|s| *s == 0) {
            return fail("pool kernels and strides must be positive".into());
        }
        if self.heads == 0 || self.channels() % self.heads != 0 {
            return fail(format!(
                "channel count {} is not divisible by {} heads",
                self.channels(),
                self.heads
            ));
        }
        if self.encoder_layers == 0 {
            return fail("encoder needs at least one layer".into());
        }
        if self.ffn_multiplier == 0 {
            return fail("ffn_multiplier must be positive".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail("lambda must be finite and non-negative".into());
        }
        if self.class_count == 0 {
            return fail("class_count must be positive".into());
        }
        if self.attn_map_count == 0 {
            return fail("attn_map_count must be positive".into());
        }
        if self.attention_source == AttentionSource::RawChannels
            && self.attn_map_count != self.channels()
        {
            return fail("raw-channel attention maps require attn_map_count == C".into());
        }
        Ok(())
    }
}

/// Attention cropping / masking parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_threshold_range: (f64, f64),
    pub mask_threshold_range: (f64, f64),
    /// Cells added on each side of the cropped span.
    pub crop_dilation: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_threshold_range: (0.4, 0.6),
            mask_threshold_range: (0.2, 0.5),
            crop_dilation: 1000,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("crop", self.crop_threshold_range),
            ("mask", self.mask_threshold_range),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} threshold range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pads_short_traces_with_zero_suffix() {
        let t = DirectionTrace::pad_or_truncate(&[1, -1, 1], 5).unwrap();
        assert_eq!(t.values(), &[1, -1, 1, 0, 0]);
        assert_eq!(t.true_length(), 3);
    }

    #[test]
    fn truncation_keeps_prefix() {
        let t = DirectionTrace::pad_or_truncate(&[1, -1, 1, -1], 2).unwrap();
        assert_eq!(t.values(), &[1, -1]);
        assert_eq!(t.true_length(), 2);
    }

    #[test]
    fn rejects_empty_and_invalid_traces() {
        assert!(matches!(
            DirectionTrace::pad_or_truncate(&[], 3),
            Err(Error::EmptyTrace)
        ));
        assert!(matches!(
            DirectionTrace::pad_or_truncate(&[1, 0, 1], 3),
            Err(Error::InvalidDirection { position: 1, .. })
        ));
        assert!(matches!(
            DirectionTrace::pad_or_truncate(&[1, 2], 3),
            Err(Error::InvalidDirection { value: 2, .. })
        ));
    }

    #[test]
    fn from_parts_rejects_nonzero_padding() {
        assert!(DirectionTrace::from_parts(vec![1, 0, 1], 1).is_err());
        assert!(DirectionTrace::from_parts(vec![1, 0, 1, 0], 3).is_ok());
        let t = DirectionTrace::from_values(vec![0, -1, 0, 0]).unwrap();
        assert_eq!(t.true_length(), 2);
    }

    #[test]
    fn label_encoding() {
        assert_eq!(encode_labels([0, 2], 4).unwrap().bits(), &[1, 0, 1, 0]);
        assert_eq!(encode_labels([], 3).unwrap().bits(), &[0, 0, 0]);
        assert!(matches!(
            encode_labels([5], 4),
            Err(Error::LabelOutOfRange { id: 5, class_count: 4 })
        ));
    }

    #[test]
    fn full_scale_feature_shape() {
        let cfg = ModelConfig::full_scale(1000);
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_lengths(), vec![10_000, 2000, 400, 80, 16]);
        assert_eq!(cfg.channels(), 640);
        assert_eq!(cfg.head_dim(), 80);
        assert_eq!(cfg.ffn_dim(), 2560);
    }

    #[test]
    fn config_validation_catches_bad_heads() {
        let mut cfg = ModelConfig::full_scale(10);
        cfg.heads = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let s = Sample {
            id: "a".into(),
            trace: DirectionTrace::pad_or_truncate(&[1], 2).unwrap(),
            labels: encode_labels([0], 2).unwrap(),
            tab_count: 1,
        };
        let err = Dataset::new(
            vec![s.clone(), s],
            Dataset::default_class_names(2),
            serde_json::Value::Null,
        );
        assert!(err.is_err());
    }

    proptest! {
        #[test]
        fn pad_is_idempotent(raw in prop::collection::vec(prop::bool::ANY, 1..60), len in 1usize..80) {
            let raw: Vec<i8> = raw.into_iter().map(|b| if b { 1 } else { -1 }).collect();
            let once = DirectionTrace::pad_or_truncate(&raw, len).unwrap();
            let twice = DirectionTrace::pad_or_truncate(once.active(), len).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.len(), len);
        }

        #[test]
        fn encode_decode_identity(ids in prop::collection::btree_set(0usize..32, 0..10)) {
            let v = encode_labels(ids.iter().copied(), 32).unwrap();
            prop_assert_eq!(v.decode(), ids.into_iter().collect::<Vec<_>>());
        }
    }
}
