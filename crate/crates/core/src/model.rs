//! Model wiring: backbone, encoder and head behind a common multi-label interface
//! shared with the DF baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{tokens_to_channel_major, Backbone, BackboneCache, BackboneOutput, Mode};
use crate::baseline::{DfConfig, DfModel};
use crate::encoder::{Encoder, EncoderCache};
use crate::error::{Error, Result};
use crate::head::{CsraHead, HeadCache};
use crate::nn::{Module, Param, Real};
use crate::types::{DirectionTrace, ModelConfig};

/// Non-negative attention maps for a batch, `(B, C', M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub batch: usize,
    pub count: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl AttentionMaps {
    fn from_backbone<T: Real>(out: &BackboneOutput<T>) -> Self {
        let data = out.maps_bmc();
        // (B, M, C') to (B, C', M)
        let (b, m, c) = (out.batch, out.len, out.map_channels);
        let mut swapped = vec![0.0; data.len()];
        for s in 0..b {
            for j in 0..m {
                for k in 0..c {
                    swapped[(s * c + k) * m + j] = data[(s * m + j) * c + k].f64();
                }
            }
        }
        Self { batch: b, count: c, len: m, data: swapped }
    }

    /// The `C'` maps of sample `b`.
    pub fn sample(&self, b: usize) -> Vec<Vec<f64>> {
        self.data[b * self.count * self.len..][..self.count * self.len]
            .chunks(self.len)
            .map(|c| c.to_vec())
            .collect()
    }
}

pub struct TrainForward<T, C> {
    pub logits: Vec<T>,
    pub maps: Option<AttentionMaps>,
    pub cache: C,
}

/// A trace-batch to multi-label-logits model trained by [`crate::train`].
pub trait MultiLabelModel<T: Real>: Module<T> {
    type Cache;

    fn spec(&self) -> ModelSpec;
    fn seq_len(&self) -> usize;
    fn class_count(&self) -> usize;
    /// Training-mode forward pass; batch-norm running statistics are updated.
    fn forward_train(&mut self, x: &[T], batch: usize) -> Result<TrainForward<T, Self::Cache>>;
    /// Accumulates gradients for `dlogits` `(B, W_n)`.
    fn backward(&mut self, cache: &Self::Cache, dlogits: &[T]);
    /// Inference-mode logits `(B, W_n)`.
    fn predict(&self, x: &[T], batch: usize) -> Result<Vec<T>>;
}

/// Flattens traces into a `(B, L)` input row per trace.
pub fn traces_to_input<T: Real>(traces: &[&DirectionTrace]) -> Vec<T> {
    traces
        .iter()
        .flat_map(|t| t.values().iter().map(|v| T::c(*v as f64)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Adwpf<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub encoder: Encoder<T>,
    pub head: CsraHead<T>,
}

#[derive(Debug, Clone)]
pub struct AdwpfCache<T> {
    backbone: BackboneCache<T>,
    encoder: EncoderCache<T>,
    head: HeadCache<T>,
    batch: usize,
    len: usize,
}

impl<T: Real> Adwpf<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config, &mut rng)?;
        let encoder = Encoder::new(config, &mut rng)?;
        let head = CsraHead::new(config.class_count, config.channels(), config.lambda, &mut rng);
        Ok(Self { config: config.clone(), backbone, encoder, head })
    }

    /// Feature map `(B, M, C)` and attention maps from an inference-mode backbone pass.
    pub fn extract(&self, x: &[T], batch: usize) -> Result<(Vec<T>, AttentionMaps)> {
        let (out, _) = self.backbone.forward(x, batch, Mode::Eval)?;
        Ok((out.features_bmc(), AttentionMaps::from_backbone(&out)))
    }

    /// Inference-mode attention maps, as used for visualisation.
    pub fn attention_maps(&self, x: &[T], batch: usize) -> Result<AttentionMaps> {
        Ok(self.extract(x, batch)?.1)
    }

    pub fn encode(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        let (tokens, _) = self.extract(x, batch)?;
        Ok(self.encoder.forward(&tokens, batch, false)?.0)
    }
}

impl<T: Real> Module<T> for Adwpf<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.backbone.visit(f);
        self.encoder.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_mut(f);
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl<T: Real> MultiLabelModel<T> for Adwpf<T> {
    type Cache = AdwpfCache<T>;

    fn spec(&self) -> ModelSpec {
        ModelSpec::Adwpf(self.config.clone())
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn forward_train(&mut self, x: &[T], batch: usize) -> Result<TrainForward<T, AdwpfCache<T>>> {
        let (out, bcache) = self.backbone.forward(x, batch, Mode::Train)?;
        let bcache = bcache.expect("training cache");
        self.backbone.update_running_stats(&bcache);
        let maps = AttentionMaps::from_backbone(&out);
        let tokens = out.features_bmc();
        let (o, ecache) = self.encoder.forward(&tokens, batch, true)?;
        let (logits, hcache) = self.head.forward(&o, batch, true);
        Ok(TrainForward {
            logits,
            maps: Some(maps),
            cache: AdwpfCache {
                backbone: bcache,
                encoder: ecache.expect("training cache"),
                head: hcache.expect("training cache"),
                batch,
                len: out.len,
            },
        })
    }

    fn backward(&mut self, cache: &AdwpfCache<T>, dlogits: &[T]) {
        let dtok = self.head.backward(&cache.head, dlogits);
        let dz = self.encoder.backward(&cache.encoder, &dtok);
        let dfeat = tokens_to_channel_major(&dz, self.config.channels(), cache.batch * cache.len);
        self.backbone.backward(&cache.backbone, &dfeat);
    }

    fn predict(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        let o = self.encode(x, batch)?;
        Ok(self.head.forward(&o, batch, false).0)
    }
}

/// Serialisable architecture description stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Adwpf(ModelConfig),
    Df(DfConfig),
}

impl ModelSpec {
    pub fn class_count(&self) -> usize {
        match self {
            Self::Adwpf(c) => c.class_count,
            Self::Df(c) => c.class_count,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Self::Adwpf(c) => c.seq_len,
            Self::Df(c) => c.seq_len,
        }
    }

    pub fn build<T: Real>(&self, seed: u64) -> Result<AnyModel<T>> {
        Ok(match self {
            Self::Adwpf(c) => AnyModel::Adwpf(Adwpf::new(c, seed)?),
            Self::Df(c) => AnyModel::Df(DfModel::new(c, seed)?),
        })
    }
}

/// Either model kind, for code that only needs inference.
#[derive(Debug, Clone)]
pub enum AnyModel<T> {
    Adwpf(Adwpf<T>),
    Df(DfModel<T>),
}

impl<T: Real> AnyModel<T> {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Self::Adwpf(m) => m.spec(),
            Self::Df(m) => m.spec(),
        }
    }

    pub fn predict(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        match self {
            Self::Adwpf(m) => m.predict(x, batch),
            Self::Df(m) => m.predict(x, batch),
        }
    }

    pub fn as_adwpf(&self) -> Result<&Adwpf<T>> {
        match self {
            Self::Adwpf(m) => Ok(m),
            Self::Df(_) => Err(Error::Config("the DF baseline has no attention maps".into())),
        }
    }
}

impl<T: Real> Module<T> for AnyModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Self::Adwpf(m) => m.visit(f),
            Self::Df(m) => m.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Self::Adwpf(m) => m.visit_mut(f),
            Self::Df(m) => m.visit_mut(f),
        }
    }
}
