//! Transformer encoder over the backbone feature map.
//!
//! Tokens are row-major `(B * M, C)`. A learnable positional table is added once,
//! then each layer applies post-norm multi-head self-attention and a position-wise
//! feed-forward block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gemm, leaky_relu, leaky_relu_backward, softmax_backward, softmax_rows, LayerNorm, LayerNormCache, Linear, Mat, MatMut, Module, Param, Real};
use crate::types::ModelConfig;

pub const POSITIONAL_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct EncoderLayer<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wu: Linear<T>,
    pub ln1: LayerNorm<T>,
    pub w1: Linear<T>,
    pub w2: Linear<T>,
    pub ln2: LayerNorm<T>,
    heads: usize,
    scale: f64,
    slope: T,
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    input: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `(B, h, M, M)` attention weights.
    attn: Vec<T>,
    concat: Vec<T>,
    ln1: LayerNormCache<T>,
    u: Vec<T>,
    hidden: Vec<T>,
    ln2: LayerNormCache<T>,
}

impl<T: Real> EncoderLayer<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, heads: usize, ffn_dim: usize, scale_by_head_dim: bool, slope: f64, rng: &mut R) -> Self {
        let lin = |n: &str, i, o, rng: &mut R| Linear::new(&format!("{name}.{n}"), i, o, false, rng);
        let denom = if scale_by_head_dim { channels / heads } else { channels };
        Self {
            wq: lin("wq", channels, channels, rng),
            wk: lin("wk", channels, channels, rng),
            wv: lin("wv", channels, channels, rng),
            wu: lin("wu", channels, channels, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), channels),
            w1: lin("w1", channels, ffn_dim, rng),
            w2: lin("w2", ffn_dim, channels, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), channels),
            heads,
            scale: 1.0 / (denom as f64).sqrt(),
            slope: T::c(slope),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.inputs
    }

    /// Multi-head attention before the output projection: the per-head outputs
    /// concatenated along channels, plus the attention weights.
    pub fn attention(&self, q: &[T], k: &[T], v: &[T], batch: usize, m: usize) -> Result<(Vec<T>, Vec<T>)> {
        let c = self.channels();
        let ch = c / self.heads;
        let scale = T::c(self.scale);
        let mut attn = vec![T::zero(); batch * self.heads * m * m];
        let mut out = vec![T::zero(); batch * m * c];
        for b in 0..batch {
            for h in 0..self.heads {
                let a = &mut attn[(b * self.heads + h) * m * m..][..m * m];
                gemm(
                    scale,
                    Mat::new(q, batch * m, c).block(b * m, h * ch, m, ch),
                    Mat::new(k, batch * m, c).block(b * m, h * ch, m, ch).t(),
                    T::zero(),
                    MatMut::new(a, m, m),
                );
                if a.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { what: "attention logits", batch: None });
                }
                softmax_rows(a, m);
                gemm(
                    T::one(),
                    Mat::new(a, m, m),
                    Mat::new(v, batch * m, c).block(b * m, h * ch, m, ch),
                    T::zero(),
                    MatMut::new(&mut out, batch * m, c).block(b * m, h * ch, m, ch),
                );
            }
        }
        Ok((out, attn))
    }

    /// Multi-head self-attention sublayer: `LayerNorm(z + Concat(heads) W_u)`.
    pub fn mhsa(&self, z: &[T], batch: usize, m: usize) -> Result<Vec<T>> {
        let rows = batch * m;
        let (q, k, v) = (self.wq.forward(z, rows), self.wk.forward(z, rows), self.wv.forward(z, rows));
        let (concat, _) = self.attention(&q, &k, &v, batch, m)?;
        let mut u = self.wu.forward(&concat, rows);
        u.iter_mut().zip(z).for_each(|(a, b)| *a += *b);
        Ok(self.ln1.forward(&u).0)
    }

    /// Feed-forward sublayer: `LayerNorm(sigma(u W_1) W_2 + u)`.
    pub fn ffn(&self, u: &[T], rows: usize) -> Vec<T> {
        let mut hidden = self.w1.forward(u, rows);
        leaky_relu(&mut hidden, self.slope);
        let mut p = self.w2.forward(&hidden, rows);
        p.iter_mut().zip(u).for_each(|(a, b)| *a += *b);
        self.ln2.forward(&p).0
    }

    pub fn forward(&self, z: &[T], batch: usize, m: usize, keep: bool) -> Result<(Vec<T>, Option<LayerCache<T>>)> {
        let rows = batch * m;
        let (q, k, v) = (self.wq.forward(z, rows), self.wk.forward(z, rows), self.wv.forward(z, rows));
        let (concat, attn) = self.attention(&q, &k, &v, batch, m)?;
        let mut pre1 = self.wu.forward(&concat, rows);
        pre1.iter_mut().zip(z).for_each(|(a, b)| *a += *b);
        let (u, ln1) = self.ln1.forward(&pre1);
        let mut hidden = self.w1.forward(&u, rows);
        leaky_relu(&mut hidden, self.slope);
        let mut pre2 = self.w2.forward(&hidden, rows);
        pre2.iter_mut().zip(&u).for_each(|(a, b)| *a += *b);
        let (out, ln2) = self.ln2.forward(&pre2);
        let cache = keep.then(|| LayerCache { input: z.to_vec(), q, k, v, attn, concat, ln1, u, hidden, ln2 });
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &LayerCache<T>, batch: usize, m: usize, dout: &[T]) -> Vec<T> {
        let rows = batch * m;
        let c = self.channels();
        let ch = c / self.heads;
        let scale = T::c(self.scale);

        let dpre2 = self.ln2.backward(&cache.ln2, dout);
        let mut dhidden = self.w2.backward(&cache.hidden, rows, &dpre2);
        leaky_relu_backward(&cache.hidden, &mut dhidden, self.slope);
        let mut du = self.w1.backward(&cache.u, rows, &dhidden);
        du.iter_mut().zip(&dpre2).for_each(|(a, b)| *a += *b);

        let dpre1 = self.ln1.backward(&cache.ln1, &du);
        let dconcat = self.wu.backward(&cache.concat, rows, &dpre1);

        let mut dq = vec![T::zero(); rows * c];
        let mut dk = vec![T::zero(); rows * c];
        let mut dv = vec![T::zero(); rows * c];
        let mut da = vec![T::zero(); m * m];
        for b in 0..batch {
            for h in 0..self.heads {
                let a = &cache.attn[(b * self.heads + h) * m * m..][..m * m];
                let dout_h = Mat::new(&dconcat, rows, c).block(b * m, h * ch, m, ch);
                gemm(
                    T::one(),
                    dout_h,
                    Mat::new(&cache.v, rows, c).block(b * m, h * ch, m, ch).t(),
                    T::zero(),
                    MatMut::new(&mut da, m, m),
                );
                gemm(
                    T::one(),
                    Mat::new(a, m, m).t(),
                    dout_h,
                    T::zero(),
                    MatMut::new(&mut dv, rows, c).block(b * m, h * ch, m, ch),
                );
                softmax_backward(a, &mut da, m);
                gemm(
                    scale,
                    Mat::new(&da, m, m),
                    Mat::new(&cache.k, rows, c).block(b * m, h * ch, m, ch),
                    T::zero(),
                    MatMut::new(&mut dq, rows, c).block(b * m, h * ch, m, ch),
                );
                gemm(
                    scale,
                    Mat::new(&da, m, m).t(),
                    Mat::new(&cache.q, rows, c).block(b * m, h * ch, m, ch),
                    T::zero(),
                    MatMut::new(&mut dk, rows, c).block(b * m, h * ch, m, ch),
                );
            }
        }
        let mut dz = dpre1;
        for (lin, g) in [(&mut self.wq, &dq), (&mut self.wk, &dk), (&mut self.wv, &dv)] {
            let d = lin.backward(&cache.input, rows, g);
            dz.iter_mut().zip(&d).for_each(|(a, b)| *a += *b);
        }
        dz
    }
}

impl<T: Real> Module<T> for EncoderLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.wq.visit(f);
        self.wk.visit(f);
        self.wv.visit(f);
        self.wu.visit(f);
        self.ln1.visit(f);
        self.w1.visit(f);
        self.w2.visit(f);
        self.ln2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.wq.visit_mut(f);
        self.wk.visit_mut(f);
        self.wv.visit_mut(f);
        self.wu.visit_mut(f);
        self.ln1.visit_mut(f);
        self.w1.visit_mut(f);
        self.w2.visit_mut(f);
        self.ln2.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    /// `(M, C)`.
    pub positional: Param<T>,
    pub layers: Vec<EncoderLayer<T>>,
    len: usize,
    channels: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    layers: Vec<LayerCache<T>>,
    batch: usize,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (m, c) = (cfg.feature_len(), cfg.channels());
        let positional = Param::normal("encoder.positional", &[m, c], POSITIONAL_INIT_STD, rng);
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    &format!("encoder.layer{i}"),
                    c,
                    cfg.heads,
                    cfg.ffn_dim(),
                    cfg.scale_by_head_dim,
                    cfg.leaky_slope,
                    rng,
                )
            })
            .collect();
        Ok(Self { positional, layers, len: m, channels: c })
    }

    pub fn add_positional(&self, z: &[T], batch: usize) -> Result<Vec<T>> {
        let mc = self.len * self.channels;
        if z.len() != batch * mc {
            return Err(Error::Shape(format!(
                "encoder expects {batch} x {} x {} tokens, got {} values",
                self.len,
                self.channels,
                z.len()
            )));
        }
        let mut out = z.to_vec();
        for chunk in out.chunks_exact_mut(mc) {
            chunk.iter_mut().zip(&self.positional.value).for_each(|(a, b)| *a += *b);
        }
        Ok(out)
    }

    /// `z` is `(B * M, C)`.
    pub fn forward(&self, z: &[T], batch: usize, keep: bool) -> Result<(Vec<T>, Option<EncoderCache<T>>)> {
        let mut h = self.add_positional(z, batch)?;
        let mut caches = Vec::new();
        for layer in &self.layers {
            let (out, c) = layer.forward(&h, batch, self.len, keep)?;
            caches.extend(c);
            h = out;
        }
        Ok((h, keep.then_some(EncoderCache { layers: caches, batch })))
    }

    pub fn backward(&mut self, cache: &EncoderCache<T>, dout: &[T]) -> Vec<T> {
        let mut g = dout.to_vec();
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            g = layer.backward(c, cache.batch, self.len, &g);
        }
        let mc = self.len * self.channels;
        for chunk in g.chunks_exact(mc) {
            self.positional.grad.iter_mut().zip(chunk).for_each(|(a, b)| *a += *b);
        }
        g
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.positional);
        for l in &self.layers {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.positional);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AttentionSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(m_target: usize, c: usize, heads: usize) -> ModelConfig {
        // Pools of kernel 1 and stride 1 keep the length, so seq_len == M.
        ModelConfig {
            seq_len: m_target,
            filters: vec![c],
            kernel_sizes: vec![3],
            pool_kernels: vec![1],
            pool_strides: vec![1],
            attn_map_count: 1,
            attention_source: AttentionSource::Head,
            encoder_layers: 1,
            heads,
            ffn_multiplier: 4,
            lambda: 0.3,
            class_count: 2,
            leaky_slope: 0.01,
            scale_by_head_dim: false,
        }
    }

    fn tokens(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn positional_add_identities() {
        let enc = Encoder::<f64>::new(&cfg(3, 2, 1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let zeros = vec![0.0; 12];
        let out = enc.add_positional(&zeros, 2).unwrap();
        assert_eq!(&out[..6], &enc.positional.value[..]);
        assert_eq!(&out[6..], &enc.positional.value[..]);
        let mut e2 = enc.clone();
        e2.positional.value.iter_mut().for_each(|v| *v = 0.0);
        let z = tokens(12, 1);
        assert_eq!(e2.add_positional(&z, 2).unwrap(), z);
        assert!(enc.add_positional(&z[..6], 2).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic_and_average_identical_values() {
        let layer = EncoderLayer::<f64>::new("l", 4, 2, 8, false, 0.01, &mut ChaCha8Rng::seed_from_u64(2));
        let (q, k) = (tokens(2 * 3 * 4, 3), tokens(2 * 3 * 4, 4));
        let v: Vec<f64> = (0..6).flat_map(|_| [0.5, -1.0, 2.0, 3.0]).collect();
        let (out, attn) = layer.attention(&q, &k, &v, 2, 3).unwrap();
        for row in attn.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for row in out.chunks(4) {
            for (a, b) in row.iter().zip([0.5, -1.0, 2.0, 3.0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_hand_evaluation() {
        // M=2, C=2, h=1; scale 1/sqrt(2).
        let layer = EncoderLayer::<f64>::new("l", 2, 1, 2, false, 0.01, &mut ChaCha8Rng::seed_from_u64(0));
        let q = vec![1.0, 0.0, 0.0, 2.0];
        let k = vec![1.0, 1.0, 2.0, -1.0];
        let v = vec![1.0, 2.0, 3.0, 4.0];
        let (out, _) = layer.attention(&q, &k, &v, 1, 2).unwrap();
        let s = 2f64.sqrt();
        let row = |l0: f64, l1: f64| {
            let (e0, e1) = ((l0 / s).exp(), (l1 / s).exp());
            let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            [w0 * 1.0 + w1 * 3.0, w0 * 2.0 + w1 * 4.0]
        };
        let want: Vec<f64> = row(1.0, 2.0).into_iter().chain(row(2.0, -2.0)).collect();
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_ffn_branch_is_plain_layer_norm() {
        let mut layer = EncoderLayer::<f64>::new("l", 4, 2, 16, false, 0.01, &mut ChaCha8Rng::seed_from_u64(5));
        layer.w1.weight.value.iter_mut().for_each(|w| *w = 0.0);
        let u = tokens(12, 6);
        assert_eq!(layer.ffn(&u, 3), layer.ln2.forward(&u).0);
    }

    #[test]
    fn scalar_ffn() {
        let mut layer = EncoderLayer::<f64>::new("l", 1, 1, 1, false, 0.01, &mut ChaCha8Rng::seed_from_u64(5));
        layer.w1.weight.value = vec![2.0];
        layer.w2.weight.value = vec![-0.5];
        // C=1: the layer norm maps everything to beta.
        layer.ln2.beta.value = vec![0.25];
        assert_eq!(layer.ffn(&[3.0], 1), vec![0.25]);
        layer.ln2.gamma.value = vec![0.0];
        assert_eq!(layer.ffn(&[-3.0], 1), vec![0.25]);
    }

    #[test]
    fn one_layer_is_one_mhsa_then_ffn() {
        let c = cfg(4, 8, 2);
        let enc = Encoder::<f64>::new(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let z = tokens(2 * 4 * 8, 10);
        let (out, _) = enc.forward(&z, 2, false).unwrap();
        let zp = enc.add_positional(&z, 2).unwrap();
        let l = &enc.layers[0];
        let want = l.ffn(&l.mhsa(&zp, 2, 4).unwrap(), 8);
        assert_eq!(out, want);
    }

    #[test]
    fn permutation_equivariance_without_positional() {
        let c = cfg(4, 8, 2);
        let mut enc = Encoder::<f64>::new(&c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let z = tokens(4 * 8, 12);
        let perm = [2usize, 0, 3, 1];
        let permute = |x: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&p| x[p * 8..(p + 1) * 8].to_vec()).collect() };

        let (with_p, _) = enc.forward(&z, 1, false).unwrap();
        let (with_p_perm, _) = enc.forward(&permute(&z), 1, false).unwrap();
        let diff: f64 = permute(&with_p).iter().zip(&with_p_perm).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "learnable positions should break equivariance");

        enc.positional.value.iter_mut().for_each(|v| *v = 0.0);
        let (out, _) = enc.forward(&z, 1, false).unwrap();
        let (out_perm, _) = enc.forward(&permute(&z), 1, false).unwrap();
        for (a, b) in permute(&out).iter().zip(&out_perm) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for scale_by_head_dim in [false, true] {
            let mut c = cfg(4, 8, 2);
            c.scale_by_head_dim = scale_by_head_dim;
            c.encoder_layers = 2;
            let mut enc = Encoder::<f64>::new(&c, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
            let batch = 2;
            let z = tokens(batch * 4 * 8, 14);
            let w = tokens(batch * 4 * 8, 15);
            let loss = |e: &Encoder<f64>, z: &[f64]| -> f64 {
                let (o, _) = e.forward(z, batch, false).unwrap();
                o.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = enc.forward(&z, batch, true).unwrap();
            enc.zero_grad();
            let dz = enc.backward(cache.as_ref().unwrap(), &w);
            let h = 1e-6;
            let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            for i in (0..z.len()).step_by(5) {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += h;
                zm[i] -= h;
                let fd = (loss(&enc, &zp) - loss(&enc, &zm)) / (2.0 * h);
                assert!(rel(fd, dz[i]) < 1e-4, "input {i}: {fd} vs {}", dz[i]);
            }
            let mut grads = Vec::new();
            enc.visit(&mut |p| grads.push((p.len(), p.grad.clone())));
            for (pi, (n, g)) in grads.iter().enumerate() {
                for k in [0, n / 3, n - 1] {
                    let mut e = enc.clone();
                    let mut i = 0;
                    e.visit_mut(&mut |p| {
                        if i == pi {
                            p.value[k] += h;
                        }
                        i += 1;
                    });
                    let lp = loss(&e, &z);
                    let mut i = 0;
                    e.visit_mut(&mut |p| {
                        if i == pi {
                            p.value[k] -= 2.0 * h;
                        }
                        i += 1;
                    });
                    let lm = loss(&e, &z);
                    let fd = (lp - lm) / (2.0 * h);
                    assert!(rel(fd, g[k]) < 1e-4, "param {pi}[{k}]: {fd} vs {}", g[k]);
                }
            }
        }
    }
}
