//! 1D ResNet-12 feature extractor.
//!
//! Four residual stages, each three conv / batch-norm / LeakyReLU blocks with a
//! skip around the group, followed by max pooling. The final stage also yields the
//! non-negative attention maps used to guide augmentation.
//!
//! Activations are channel-major `(C, B * L)`; see [`crate::nn`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_backward, relu, BatchNorm1d, BatchNormCache, Conv1d, MaxPool1d, Module, Param, PoolCache, Real};
use crate::types::{AttentionSource, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BasicBlock<T> {
    conv: Conv1d<T>,
    bn: BatchNorm1d<T>,
}

#[derive(Debug, Clone)]
pub struct ResidualStage<T> {
    blocks: Vec<BasicBlock<T>>,
    /// 1x1 projection on the skip when channel counts differ.
    skip: Option<Conv1d<T>>,
    pool: MaxPool1d,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    /// `acts[0]` is the stage input, `acts[i + 1]` the output of block `i`.
    acts: Vec<Vec<T>>,
    bn: Vec<BatchNormCache<T>>,
    pool: PoolCache,
    len: usize,
}

/// Per-batch state kept between forward and backward.
#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    stages: Vec<StageCache<T>>,
    batch: usize,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput<T> {
    /// Feature map, `(C, B * M)`.
    pub features: Vec<T>,
    /// Attention maps, `(C', B * M)`; never differentiated.
    pub maps: Vec<T>,
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub map_channels: usize,
}

impl<T: Real> BackboneOutput<T> {
    /// Feature map as `(B, M, C)`.
    pub fn features_bmc(&self) -> Vec<T> {
        channel_major_to_tokens(&self.features, self.channels, self.batch * self.len)
    }

    /// Attention maps as `(B, M, C')`.
    pub fn maps_bmc(&self) -> Vec<T> {
        channel_major_to_tokens(&self.maps, self.map_channels, self.batch * self.len)
    }

    /// The maps of sample `b` as `C'` vectors of length M.
    pub fn sample_maps(&self, b: usize) -> Vec<Vec<f64>> {
        let n = self.batch * self.len;
        (0..self.map_channels)
            .map(|c| self.maps[c * n + b * self.len..][..self.len].iter().map(|v| v.f64()).collect())
            .collect()
    }
}

/// `(C, N)` to `(N, C)`.
pub fn channel_major_to_tokens<T: Real>(x: &[T], channels: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for c in 0..channels {
        for i in 0..n {
            out[i * channels + c] = x[c * n + i];
        }
    }
    out
}

/// `(N, C)` to `(C, N)`.
pub fn tokens_to_channel_major<T: Real>(x: &[T], channels: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for c in 0..channels {
            out[c * n + i] = x[i * channels + c];
        }
    }
    out
}

impl<T: Real> ResidualStage<T> {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, kernel: usize, pool: MaxPool1d, rng: &mut R) -> Self {
        let blocks = (0..3)
            .map(|j| BasicBlock {
                conv: Conv1d::same(&format!("{name}.block{j}.conv"), if j == 0 { cin } else { cout }, cout, kernel, rng),
                bn: BatchNorm1d::new(&format!("{name}.block{j}.bn"), cout),
            })
            .collect();
        let skip = (cin != cout).then(|| Conv1d::new(&format!("{name}.skip"), cin, cout, 1, 0, rng));
        Self { blocks, skip, pool, in_channels: cin, out_channels: cout }
    }

    /// Returns the pre-pool sum and, in training mode, the block caches.
    fn group_forward(&self, x: Vec<T>, batch: usize, len: usize, mode: Mode, slope: T) -> (Vec<T>, Vec<Vec<T>>, Vec<BatchNormCache<T>>) {
        let mut acts = vec![x];
        let mut bn_caches = Vec::new();
        for blk in &self.blocks {
            let h = blk.conv.forward(acts.last().unwrap(), batch, len);
            let mut z = match mode {
                Mode::Train => {
                    let (z, c) = blk.bn.forward_train(&h);
                    bn_caches.push(c);
                    z
                }
                Mode::Eval => blk.bn.forward_eval(&h),
            };
            leaky_relu(&mut z, slope);
            acts.push(z);
            if mode == Mode::Eval && acts.len() > 2 {
                // Only the stage input and the latest activation are needed without a backward pass.
                acts.swap_remove(1);
            }
        }
        let mut sum = acts.last().unwrap().clone();
        match &self.skip {
            Some(p) => {
                let s = p.forward(&acts[0], batch, len);
                sum.iter_mut().zip(&s).for_each(|(a, b)| *a += *b);
            }
            None => sum.iter_mut().zip(&acts[0]).for_each(|(a, b)| *a += *b),
        }
        (sum, acts, bn_caches)
    }

    fn backward(&mut self, cache: &StageCache<T>, batch: usize, dy: &[T], slope: T) -> Vec<T> {
        let dsum = self.pool.backward(&cache.pool, dy);
        let len = cache.len;
        let mut dx = match &mut self.skip {
            Some(p) => p.backward(&cache.acts[0], batch, len, &dsum),
            None => dsum.clone(),
        };
        let mut g = dsum;
        for (j, blk) in self.blocks.iter_mut().enumerate().rev() {
            leaky_relu_backward(&cache.acts[j + 1], &mut g, slope);
            let dh = blk.bn.backward(&cache.bn[j], &g);
            g = blk.conv.backward(&cache.acts[j], batch, len, &dh);
        }
        dx.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
        dx
    }
}

impl<T: Real> Module<T> for ResidualStage<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for b in &self.blocks {
            b.conv.visit(f);
            b.bn.visit(f);
        }
        if let Some(p) = &self.skip {
            p.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for b in &mut self.blocks {
            b.conv.visit_mut(f);
            b.bn.visit_mut(f);
        }
        if let Some(p) = &mut self.skip {
            p.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub stages: Vec<ResidualStage<T>>,
    /// Dedicated attention-map projection, absent for raw-channel maps.
    pub attn: Option<Conv1d<T>>,
    seq_len: usize,
    slope: T,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 1;
        let mut stages = Vec::with_capacity(cfg.filters.len());
        for (i, &cout) in cfg.filters.iter().enumerate() {
            let k = cfg.pool_kernels[i];
            let pool = MaxPool1d::new(k, cfg.pool_strides[i], k / 2);
            stages.push(ResidualStage::new(&format!("backbone.stage{i}"), cin, cout, cfg.kernel_sizes[i], pool, rng));
            cin = cout;
        }
        let attn = match cfg.attention_source {
            AttentionSource::Head => Some(Conv1d::new("backbone.attn", cin, cfg.attn_map_count, 1, 0, rng)),
            AttentionSource::RawChannels => None,
        };
        Ok(Self { stages, attn, seq_len: cfg.seq_len, slope: T::c(cfg.leaky_slope) })
    }

    pub fn channels(&self) -> usize {
        self.stages.last().unwrap().out_channels
    }

    pub fn map_channels(&self) -> usize {
        self.attn.as_ref().map_or(self.channels(), |a| a.out_channels)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// `x` holds `batch` traces of length L back to back. In training mode the
    /// returned cache also carries the batch statistics for
    /// [`Backbone::update_running_stats`].
    pub fn forward(&self, x: &[T], batch: usize, mode: Mode) -> Result<(BackboneOutput<T>, Option<BackboneCache<T>>)> {
        if batch == 0 || x.len() != batch * self.seq_len {
            return Err(Error::Shape(format!(
                "backbone expects {batch} x {} inputs, got {} values",
                self.seq_len,
                x.len()
            )));
        }
        let slope = self.slope;
        let mut h = x.to_vec();
        let mut len = self.seq_len;
        let mut caches = Vec::new();
        let last = self.stages.len() - 1;
        let mut maps = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let (sum, acts, bn) = stage.group_forward(h, batch, len, mode, slope);
            if i == last {
                let mut m = match &self.attn {
                    Some(a) => a.forward(&sum, batch, len),
                    None => sum.clone(),
                };
                relu(&mut m);
                let rows = m.len() / (batch * len);
                maps = stage.pool.forward(&m, rows, batch, len).0;
            }
            let (out, pool) = stage.pool.forward(&sum, stage.out_channels, batch, len);
            if mode == Mode::Train {
                caches.push(StageCache { acts, bn, pool, len });
            }
            len = stage.pool.out_len(len);
            h = out;
        }
        if len == 0 {
            return Err(Error::Shape("sequence pooled down to zero length".into()));
        }
        let out = BackboneOutput {
            features: h,
            maps,
            batch,
            len,
            channels: self.channels(),
            map_channels: self.map_channels(),
        };
        let cache = (mode == Mode::Train).then_some(BackboneCache { stages: caches, batch });
        Ok((out, cache))
    }

    pub fn update_running_stats(&mut self, cache: &BackboneCache<T>) {
        for (stage, c) in self.stages.iter_mut().zip(&cache.stages) {
            for (blk, bc) in stage.blocks.iter_mut().zip(&c.bn) {
                blk.bn.update_running(bc);
            }
        }
    }

    /// `dfeatures` is `(C, B * M)`. Returns the gradient with respect to the input.
    pub fn backward(&mut self, cache: &BackboneCache<T>, dfeatures: &[T]) -> Vec<T> {
        let slope = self.slope;
        let mut g = dfeatures.to_vec();
        for (stage, c) in self.stages.iter_mut().zip(&cache.stages).rev() {
            g = stage.backward(c, cache.batch, &g, slope);
        }
        g
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for s in &self.stages {
            s.visit(f);
        }
        if let Some(a) = &self.attn {
            a.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        if let Some(a) = &mut self.attn {
            a.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(seq_len: usize) -> ModelConfig {
        ModelConfig {
            seq_len,
            filters: vec![4, 8, 8, 8],
            kernel_sizes: vec![3; 4],
            pool_kernels: vec![9; 4],
            pool_strides: vec![5; 4],
            attn_map_count: 3,
            attention_source: AttentionSource::Head,
            encoder_layers: 1,
            heads: 2,
            ffn_multiplier: 2,
            lambda: 0.3,
            class_count: 3,
            leaky_slope: 0.01,
            scale_by_head_dim: false,
        }
    }

    fn input(batch: usize, len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..batch * len).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn stage_shapes_follow_config() {
        for (l, want) in [(1000, vec![200, 40, 8, 2]), (5000, vec![1000, 200, 40, 8])] {
            let mut cfg = tiny(l);
            cfg.filters = vec![2, 2, 2, 4];
            let bb = Backbone::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let x = vec![1.0f32; 2 * l];
            let (out, _) = bb.forward(&x, 2, Mode::Eval).unwrap();
            assert_eq!(out.len, *want.last().unwrap());
            assert_eq!(cfg.stage_lengths()[1..], want[..]);
            assert_eq!(out.features.len(), 2 * out.len * 4);
            assert_eq!(out.maps.len(), 2 * out.len * 3);
        }
    }

    #[test]
    fn zero_input_gives_finite_non_negative_maps() {
        let bb = Backbone::<f64>::new(&tiny(100), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (out, _) = bb.forward(&vec![0.0; 200], 2, Mode::Train).unwrap();
        assert!(out.features.iter().all(|v| v.is_finite()));
        assert!(out.maps.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn rejects_wrong_length() {
        let bb = Backbone::<f64>::new(&tiny(100), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(bb.forward(&vec![0.0; 150], 2, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroed_convolutions_with_identity_skip_pass_the_pooled_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = MaxPool1d::new(9, 5, 4);
        let mut stage = ResidualStage::<f64>::new("s", 3, 3, 3, pool, &mut rng);
        for b in &mut stage.blocks {
            b.conv.weight.value.iter_mut().for_each(|w| *w = 0.0);
        }
        let (batch, len) = (2, 30);
        let x: Vec<f64> = (0..3 * batch * len).map(|i| (i as f64 * 0.7).sin()).collect();
        let (sum, _, _) = stage.group_forward(x.clone(), batch, len, Mode::Train, 0.01);
        assert_eq!(sum, x);
        let pooled = pool.forward(&sum, 3, batch, len).0;
        assert_eq!(pooled, pool.forward(&x, 3, batch, len).0);

        // Same with a projection initialised to the identity.
        let mut stage = ResidualStage::<f64>::new("p", 3, 4, 3, pool, &mut rng);
        for b in &mut stage.blocks {
            b.conv.weight.value.iter_mut().for_each(|w| *w = 0.0);
        }
        let proj = stage.skip.as_mut().unwrap();
        proj.weight.value = vec![0.0; 12];
        for c in 0..3 {
            proj.weight.value[c * 3 + c] = 1.0;
        }
        let (sum, _, _) = stage.group_forward(x.clone(), batch, len, Mode::Train, 0.01);
        assert_eq!(&sum[..x.len()], &x[..]);
        assert!(sum[x.len()..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = tiny(100);
        let mut bb = Backbone::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let batch = 3;
        let x = input(batch, 100, 8);
        let (out, cache) = bb.forward(&x, batch, Mode::Train).unwrap();
        let w: Vec<f64> = (0..out.features.len()).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let loss = |bb: &Backbone<f64>| -> f64 {
            let (o, _) = bb.forward(&x, batch, Mode::Train).unwrap();
            o.features.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        bb.zero_grad();
        bb.backward(cache.as_ref().unwrap(), &w);
        let mut coords = Vec::new();
        let mut pi = 0;
        bb.visit(&mut |p| {
            if p.is_trainable() && !p.name.starts_with("backbone.attn") {
                for k in [0, p.len() / 2, p.len() - 1] {
                    coords.push((pi, k, p.grad[k]));
                }
            }
            pi += 1;
        });
        for (pi, k, analytic) in coords {
            let bump = |bb: &mut Backbone<f64>, d: f64| {
                let mut i = 0;
                bb.visit_mut(&mut |p| {
                    if i == pi {
                        p.value[k] += d;
                    }
                    i += 1;
                });
            };
            let h = 1e-5;
            bump(&mut bb, h);
            let lp = loss(&bb);
            bump(&mut bb, -2.0 * h);
            let lm = loss(&bb);
            bump(&mut bb, h);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {pi}[{k}]: fd {fd} analytic {analytic}");
        }
    }
}
