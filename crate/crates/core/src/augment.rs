//! Attention-guided cropping and masking of direction traces, plus the random
//! crop/mask baseline.
//!
//! A low-resolution attention map (length M) is linearly upsampled to the trace
//! length, min-max normalized to [0, 1] and thresholded. Cropping keeps the
//! dilated bounding span of the above-threshold positions and zeroes the rest;
//! masking zeroes the above-threshold positions. Both keep the trace length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AugmentConfig, DirectionTrace};

/// A {0,1} indicator over trace positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryIndicator {
    bits: Vec<u8>,
}

impl BinaryIndicator {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::InvalidTrace("indicator must be binary".into()));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    /// First and last set positions.
    pub fn span(&self) -> Option<(usize, usize)> {
        let lo = self.bits.iter().position(|b| *b == 1)?;
        let hi = self.bits.iter().rposition(|b| *b == 1)?;
        Some((lo, hi))
    }
}

/// An attention map at trace resolution with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampledMap {
    values: Vec<f64>,
}

impl UpsampledMap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Wraps values already known to lie in [0, 1].
    pub fn from_normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidTrace("normalized map values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }
}

/// Linear interpolation with aligned endpoints: `out[0] = map[0]`, `out[L-1] = map[M-1]`.
pub fn upsample_linear(map: &[f64], len: usize) -> Result<Vec<f64>> {
    let m = map.len();
    if m < 2 {
        return Err(Error::Shape(format!("cannot upsample a map of length {m}")));
    }
    if len < m {
        return Err(Error::Shape(format!("target length {len} shorter than map length {m}")));
    }
    let scale = (m - 1) as f64 / (len - 1) as f64;
    Ok((0..len)
        .map(|i| {
            let pos = i as f64 * scale;
            let lo = (pos.floor() as usize).min(m - 2);
            let frac = pos - lo as f64;
            map[lo] * (1.0 - frac) + map[lo + 1] * frac
        })
        .collect())
}

/// `(v - min) / (max - min)`, or all zeros for a constant vector.
pub fn normalize_minmax(v: &[f64]) -> UpsampledMap {
    let (min, max) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
    let range = max - min;
    let values = if v.is_empty() || range <= 0.0 || !range.is_finite() {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| ((x - min) / range).clamp(0.0, 1.0)).collect()
    };
    UpsampledMap { values }
}

/// `s_c(i) = 1` iff `a*(i) > phi`.
pub fn crop_indicator(map: &UpsampledMap, phi: f64) -> BinaryIndicator {
    BinaryIndicator {
        bits: map.values.iter().map(|a| u8::from(*a > phi)).collect(),
    }
}

/// `s_m(i) = 0` iff `a*(i) > phi`.
pub fn mask_indicator(map: &UpsampledMap, phi: f64) -> BinaryIndicator {
    BinaryIndicator {
        bits: map.values.iter().map(|a| u8::from(*a <= phi)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropOutcome {
    pub trace: DirectionTrace,
    /// Retained span after dilation, inclusive.
    pub span: Option<(usize, usize)>,
    /// The indicator had no set bit; the trace was returned unchanged.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskOutcome {
    pub trace: DirectionTrace,
    /// Every position was masked.
    pub degenerate: bool,
}

fn check_len(x: &DirectionTrace, s: &BinaryIndicator) -> Result<()> {
    if x.len() != s.len() {
        return Err(Error::Shape(format!(
            "indicator length {} does not match trace length {}",
            s.len(),
            x.len()
        )));
    }
    Ok(())
}

/// Keeps `x` on the span from the first to the last set bit of `s_c`, widened by
/// `dilation` cells on each side, and zeroes everything outside it.
pub fn attention_crop(x: &DirectionTrace, s_c: &BinaryIndicator, dilation: usize) -> Result<CropOutcome> {
    check_len(x, s_c)?;
    let Some((lo, hi)) = s_c.span() else {
        return Ok(CropOutcome {
            trace: x.clone(),
            span: None,
            degenerate: true,
        });
    };
    let lo = lo.saturating_sub(dilation);
    let hi = (hi + dilation).min(x.len() - 1);
    let values = x
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| if (lo..=hi).contains(&i) { *v } else { 0 })
        .collect();
    Ok(CropOutcome {
        trace: DirectionTrace::from_values(values)?,
        span: Some((lo, hi)),
        degenerate: false,
    })
}

/// Elementwise product `x * s_m`.
pub fn attention_mask(x: &DirectionTrace, s_m: &BinaryIndicator) -> Result<MaskOutcome> {
    check_len(x, s_m)?;
    let values = x
        .values()
        .iter()
        .zip(s_m.bits())
        .map(|(v, b)| v * *b as i8)
        .collect();
    Ok(MaskOutcome {
        trace: DirectionTrace::from_values(values)?,
        degenerate: s_m.count_ones() == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub crop: CropOutcome,
    pub mask: MaskOutcome,
    pub map_index: usize,
    pub crop_threshold: f64,
    pub mask_threshold: f64,
}

fn sample_threshold<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Picks one of the sample's attention maps uniformly, then crops and masks `x`
/// with thresholds drawn from the configured ranges.
///
/// The rng is consumed in a fixed order: map index, crop threshold, mask threshold.
pub fn augment_pair<R: Rng + ?Sized>(
    x: &DirectionTrace,
    attention_maps: &[Vec<f64>],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedPair> {
    if attention_maps.is_empty() {
        return Err(Error::Shape("no attention maps".into()));
    }
    let map_index = rng.gen_range(0..attention_maps.len());
    let crop_threshold = sample_threshold(rng, cfg.crop_threshold_range);
    let mask_threshold = sample_threshold(rng, cfg.mask_threshold_range);
    let map = normalize_minmax(&upsample_linear(&attention_maps[map_index], x.len())?);
    let crop = attention_crop(x, &crop_indicator(&map, crop_threshold), cfg.crop_dilation)?;
    let mask = attention_mask(x, &mask_indicator(&map, mask_threshold))?;
    Ok(AugmentedPair {
        crop,
        mask,
        map_index,
        crop_threshold,
        mask_threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomAugKind {
    /// Keep only the span.
    Crop,
    /// Zero the span.
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomAugOutcome {
    pub trace: DirectionTrace,
    pub kind: RandomAugKind,
    /// Half-open span `[start, end)`.
    pub span: (usize, usize),
}

/// Inclusive bounds on the random span length: `[ceil(0.1 L), floor(0.5 L)]`, at least 1.
pub fn random_span_bounds(len: usize) -> (usize, usize) {
    let lo = len.div_ceil(10).max(1);
    let hi = (len / 2).max(lo);
    (lo, hi)
}

/// Random crop or random mask, each with probability 1/2, over a uniformly placed
/// contiguous span whose length is uniform in [0.1 L, 0.5 L].
pub fn random_augment<R: Rng + ?Sized>(x: &DirectionTrace, rng: &mut R) -> Result<RandomAugOutcome> {
    let len = x.len();
    let kind = if rng.gen_bool(0.5) {
        RandomAugKind::Mask
    } else {
        RandomAugKind::Crop
    };
    let (lo, hi) = random_span_bounds(len);
    let span_len = rng.gen_range(lo..=hi).min(len);
    let start = rng.gen_range(0..=len - span_len);
    let end = start + span_len;
    let values = x
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let inside = (start..end).contains(&i);
            match (kind, inside) {
                (RandomAugKind::Crop, true) | (RandomAugKind::Mask, false) => *v,
                _ => 0,
            }
        })
        .collect();
    Ok(RandomAugOutcome {
        trace: DirectionTrace::from_values(values)?,
        kind,
        span: (start, end),
    })
}
