//! DF-style convolutional baseline with sigmoid outputs.
//!
//! Blocks of two (conv, batch-norm, LeakyReLU) layers and a max pool, then a
//! flatten and two dense layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, MultiLabelModel, TrainForward};
use crate::nn::{leaky_relu, leaky_relu_backward, BatchNorm1d, BatchNormCache, Conv1d, Linear, MaxPool1d, Module, Param, PoolCache, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfConfig {
    pub seq_len: usize,
    pub class_count: usize,
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub dense: usize,
    pub leaky_slope: f64,
}

impl DfConfig {
    pub fn standard(seq_len: usize, class_count: usize) -> Self {
        Self {
            seq_len,
            class_count,
            filters: vec![32, 64, 128, 256],
            kernel: 8,
            pool_kernel: 8,
            pool_stride: 4,
            dense: 512,
            leaky_slope: 0.01,
        }
    }

    fn pool(&self) -> MaxPool1d {
        MaxPool1d::new(self.pool_kernel, self.pool_stride, (self.pool_kernel - 1) / 2)
    }

    pub fn feature_len(&self) -> usize {
        let pool = self.pool();
        self.filters.iter().fold(self.seq_len, |l, _| pool.out_len(l))
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config("DF filters must be non-empty and positive".into()));
        }
        if self.kernel == 0 || self.pool_kernel == 0 || self.pool_stride == 0 || self.dense == 0 || self.class_count == 0 {
            return Err(Error::Config("DF sizes must be positive".into()));
        }
        if self.feature_len() == 0 {
            return Err(Error::Config(format!("seq_len {} pools down to nothing", self.seq_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvLayer<T> {
    conv: Conv1d<T>,
    bn: BatchNorm1d<T>,
}

#[derive(Debug, Clone)]
pub struct DfModel<T> {
    pub config: DfConfig,
    layers: Vec<ConvLayer<T>>,
    pool: MaxPool1d,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    slope: T,
}

#[derive(Debug, Clone)]
pub struct DfCache<T> {
    /// Input of each conv layer and its post-activation output.
    inputs: Vec<Vec<T>>,
    outputs: Vec<Vec<T>>,
    bn: Vec<BatchNormCache<T>>,
    pools: Vec<PoolCache>,
    lens: Vec<usize>,
    flat: Vec<T>,
    hidden: Vec<T>,
    batch: usize,
}

impl<T: Real> DfModel<T> {
    pub fn new(config: &DfConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 1;
        for (i, &f) in config.filters.iter().enumerate() {
            for j in 0..2 {
                let name = format!("df.block{i}.conv{j}");
                layers.push(ConvLayer {
                    conv: Conv1d::same(&name, cin, f, config.kernel, &mut rng),
                    bn: BatchNorm1d::new(&format!("df.block{i}.bn{j}"), f),
                });
                cin = f;
            }
        }
        let flat = cin * config.feature_len();
        let fc1 = Linear::new("df.fc1", flat, config.dense, true, &mut rng);
        let fc2 = Linear::new("df.fc2", config.dense, config.class_count, true, &mut rng);
        Ok(Self {
            config: config.clone(),
            layers,
            pool: config.pool(),
            fc1,
            fc2,
            slope: T::c(config.leaky_slope),
        })
    }

    fn check(&self, x: &[T], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.config.seq_len {
            return Err(Error::Shape(format!(
                "DF expects {batch} x {} inputs, got {} values",
                self.config.seq_len,
                x.len()
            )));
        }
        Ok(())
    }

    fn run(&self, x: &[T], batch: usize, cache: Option<&mut DfCache<T>>) -> Vec<T> {
        let mut h = x.to_vec();
        let mut len = self.config.seq_len;
        let mut cache = cache;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.conv.forward(&h, batch, len);
            let mut a = match cache.as_deref_mut() {
                Some(c) => {
                    let (a, bc) = layer.bn.forward_train(&z);
                    c.bn.push(bc);
                    a
                }
                None => layer.bn.forward_eval(&z),
            };
            leaky_relu(&mut a, self.slope);
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::take(&mut h));
                c.outputs.push(a.clone());
            }
            h = a;
            if i % 2 == 1 {
                let ch = layer.conv.out_channels;
                let (p, pc) = self.pool.forward(&h, ch, batch, len);
                if let Some(c) = cache.as_deref_mut() {
                    c.pools.push(pc);
                    c.lens.push(len);
                }
                len = self.pool.out_len(len);
                h = p;
            }
        }
        let ch = self.layers.last().unwrap().conv.out_channels;
        let flat = flatten(&h, ch, batch, len);
        let mut hidden = self.fc1.forward(&flat, batch);
        leaky_relu(&mut hidden, self.slope);
        let logits = self.fc2.forward(&hidden, batch);
        if let Some(c) = cache {
            c.flat = flat;
            c.hidden = hidden;
        }
        logits
    }
}

/// `(C, B * L)` to `(B, C * L)`.
fn flatten<T: Real>(x: &[T], channels: usize, batch: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            out[b * channels * len + c * len..][..len].copy_from_slice(&x[c * batch * len + b * len..][..len]);
        }
    }
    out
}

fn unflatten<T: Real>(x: &[T], channels: usize, batch: usize, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for b in 0..batch {
            out[c * batch * len + b * len..][..len].copy_from_slice(&x[b * channels * len + c * len..][..len]);
        }
    }
    out
}

impl<T: Real> Module<T> for DfModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for l in &self.layers {
            l.conv.visit(f);
            l.bn.visit(f);
        }
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.conv.visit_mut(f);
            l.bn.visit_mut(f);
        }
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

impl<T: Real> MultiLabelModel<T> for DfModel<T> {
    type Cache = DfCache<T>;

    fn spec(&self) -> ModelSpec {
        ModelSpec::Df(self.config.clone())
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn forward_train(&mut self, x: &[T], batch: usize) -> Result<TrainForward<T, DfCache<T>>> {
        self.check(x, batch)?;
        let mut cache = DfCache {
            inputs: vec![],
            outputs: vec![],
            bn: vec![],
            pools: vec![],
            lens: vec![],
            flat: vec![],
            hidden: vec![],
            batch,
        };
        let logits = self.run(x, batch, Some(&mut cache));
        for (l, bc) in self.layers.iter_mut().zip(&cache.bn) {
            l.bn.update_running(bc);
        }
        Ok(TrainForward { logits, maps: None, cache })
    }

    fn backward(&mut self, cache: &DfCache<T>, dlogits: &[T]) {
        let batch = cache.batch;
        let mut dh = self.fc2.backward(&cache.hidden, batch, dlogits);
        leaky_relu_backward(&cache.hidden, &mut dh, self.slope);
        let dflat = self.fc1.backward(&cache.flat, batch, &dh);
        let ch = self.layers.last().unwrap().conv.out_channels;
        let mut g = unflatten(&dflat, ch, batch, self.config.feature_len());
        for i in (0..self.layers.len()).rev() {
            if i % 2 == 1 {
                g = self.pool.backward(&cache.pools[i / 2], &g);
            }
            let len = cache.lens[i / 2];
            let layer = &mut self.layers[i];
            leaky_relu_backward(&cache.outputs[i], &mut g, self.slope);
            let dz = layer.bn.backward(&cache.bn[i], &g);
            g = layer.conv.backward(&cache.inputs[i], batch, len, &dz);
        }
    }

    fn predict(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        self.check(x, batch)?;
        Ok(self.run(x, batch, None))
    }
}
