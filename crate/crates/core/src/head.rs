//! Class-specific residual attention head.
//!
//! For tokens `o` (M x C) and class weights `m` (W_n x C):
//!
//! - `s[i][j]` is the softmax over positions `j` of `o_j . m_i`;
//! - `v_i = sum_j s[i][j] o_j` and `g` is the position mean of `o`;
//! - `r_i = g + lambda v_i`, and the logit of class `i` is `m_i . r_i`.
//!
//! With `lambda = 0` this is a global-average-pooling linear classifier.

use rand::Rng;

use crate::nn::{gemm, softmax_rows, Mat, MatMut, Module, Param, Real};

/// Attention scores `(W_n, M)` for one sample's tokens `o` `(M, C)`.
pub fn class_attention<T: Real>(o: &[T], m: &[T], positions: usize, classes: usize) -> Vec<T> {
    let c = o.len() / positions;
    let mut s = vec![T::zero(); classes * positions];
    gemm(
        T::one(),
        Mat::new(m, classes, c),
        Mat::new(o, positions, c).t(),
        T::zero(),
        MatMut::new(&mut s, classes, positions),
    );
    softmax_rows(&mut s, positions);
    s
}

/// Residual features `r` `(W_n, C)` from tokens `o` and scores `s`.
pub fn csra_features<T: Real>(o: &[T], s: &[T], lambda: T, positions: usize) -> Vec<T> {
    let c = o.len() / positions;
    let classes = s.len() / positions;
    let g = position_mean(o, positions);
    let mut r = vec![T::zero(); classes * c];
    gemm(
        lambda,
        Mat::new(s, classes, positions),
        Mat::new(o, positions, c),
        T::zero(),
        MatMut::new(&mut r, classes, c),
    );
    for row in r.chunks_exact_mut(c) {
        row.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
    }
    r
}

pub fn position_mean<T: Real>(o: &[T], positions: usize) -> Vec<T> {
    let c = o.len() / positions;
    let inv = T::one() / T::c(positions as f64);
    let mut g = vec![T::zero(); c];
    for row in o.chunks_exact(c) {
        g.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
    }
    g.iter_mut().for_each(|v| *v *= inv);
    g
}

#[derive(Debug, Clone)]
pub struct CsraHead<T> {
    /// `(W_n, C)`.
    pub class_weights: Param<T>,
    pub lambda: f64,
    pub classes: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    tokens: Vec<T>,
    /// `(B, W_n, M)` raw class/position scores, then their softmax.
    scores: Vec<T>,
    attn: Vec<T>,
    means: Vec<T>,
    batch: usize,
    positions: usize,
}

impl<T: Real> CsraHead<T> {
    pub fn new<R: Rng + ?Sized>(classes: usize, channels: usize, lambda: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        Self {
            class_weights: Param::uniform("head.class_weights", &[classes, channels], bound, rng),
            lambda,
            classes,
            channels,
        }
    }

    /// `o` is `(B * M, C)`; returns logits `(B, W_n)`.
    pub fn forward(&self, o: &[T], batch: usize, keep: bool) -> (Vec<T>, Option<HeadCache<T>>) {
        let (c, w) = (self.channels, self.classes);
        let positions = o.len() / (batch * c);
        let lambda = T::c(self.lambda);
        let mut logits = vec![T::zero(); batch * w];
        let mut scores = Vec::new();
        let mut attn = Vec::new();
        let mut means = Vec::with_capacity(batch * c);
        let mv = &self.class_weights.value;
        for b in 0..batch {
            let ob = &o[b * positions * c..][..positions * c];
            let g = position_mean(ob, positions);
            for i in 0..w {
                logits[b * w + i] = mv[i * c..][..c].iter().zip(&g).map(|(x, y)| *x * *y).sum();
            }
            if self.lambda != 0.0 {
                let mut a = vec![T::zero(); w * positions];
                gemm(T::one(), Mat::new(mv, w, c), Mat::new(ob, positions, c).t(), T::zero(), MatMut::new(&mut a, w, positions));
                let mut s = a.clone();
                softmax_rows(&mut s, positions);
                for i in 0..w {
                    let extra: T = s[i * positions..][..positions]
                        .iter()
                        .zip(&a[i * positions..][..positions])
                        .map(|(x, y)| *x * *y)
                        .sum();
                    logits[b * w + i] += lambda * extra;
                }
                if keep {
                    scores.extend(a);
                    attn.extend(s);
                }
            }
            if keep {
                means.extend(g);
            }
        }
        let cache = keep.then(|| HeadCache { tokens: o.to_vec(), scores, attn, means, batch, positions });
        (logits, cache)
    }

    /// Returns the gradient with respect to the tokens.
    pub fn backward(&mut self, cache: &HeadCache<T>, dlogits: &[T]) -> Vec<T> {
        let (c, w, mpos) = (self.channels, self.classes, cache.positions);
        let lambda = T::c(self.lambda);
        let inv_m = T::one() / T::c(mpos as f64);
        let mut dtok = vec![T::zero(); cache.tokens.len()];
        let mut da = vec![T::zero(); w * mpos];
        for b in 0..cache.batch {
            let dl = &dlogits[b * w..][..w];
            let g = &cache.means[b * c..][..c];
            let mut dg = vec![T::zero(); c];
            for i in 0..w {
                let mi = &self.class_weights.value[i * c..][..c];
                for k in 0..c {
                    self.class_weights.grad[i * c + k] += dl[i] * g[k];
                    dg[k] += dl[i] * mi[k];
                }
            }
            let db = &mut dtok[b * mpos * c..][..mpos * c];
            for row in db.chunks_exact_mut(c) {
                row.iter_mut().zip(&dg).for_each(|(a, v)| *a += *v * inv_m);
            }
            if self.lambda != 0.0 {
                let a = &cache.scores[b * w * mpos..][..w * mpos];
                let s = &cache.attn[b * w * mpos..][..w * mpos];
                for i in 0..w {
                    let ai = &a[i * mpos..][..mpos];
                    let si = &s[i * mpos..][..mpos];
                    let r: T = ai.iter().zip(si).map(|(x, y)| *x * *y).sum();
                    for j in 0..mpos {
                        da[i * mpos + j] = dl[i] * lambda * si[j] * (T::one() + ai[j] - r);
                    }
                }
                let ob = &cache.tokens[b * mpos * c..][..mpos * c];
                gemm(T::one(), Mat::new(&da, w, mpos), Mat::new(ob, mpos, c), T::one(), MatMut::new(&mut self.class_weights.grad, w, c));
                gemm(
                    T::one(),
                    Mat::new(&da, w, mpos).t(),
                    Mat::new(&self.class_weights.value, w, c),
                    T::one(),
                    MatMut::new(db, mpos, c),
                );
            }
        }
        dtok
    }
}

impl<T: Real> Module<T> for CsraHead<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.class_weights);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.class_weights);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn scalar_example() {
        let o = [1.0, 3.0];
        let m = [1.0];
        let s = class_attention(&o, &m, 2, 1);
        let e2 = 2f64.exp();
        assert!((s[0] - 1.0 / (1.0 + e2)).abs() < 1e-12);
        assert!((s[0] - 0.1192).abs() < 5e-5 && (s[1] - 0.8808).abs() < 5e-5);
        let v: f64 = s[0] * 1.0 + s[1] * 3.0;
        assert!((v - 2.7616).abs() < 5e-5);
        let r = csra_features(&o, &s, 0.3, 2);
        assert!((r[0] - 2.8285).abs() < 5e-5);

        let mut head = CsraHead::<f64>::new(1, 1, 0.3, &mut ChaCha8Rng::seed_from_u64(0));
        head.class_weights.value = vec![1.0];
        let (logits, _) = head.forward(&o, 1, false);
        assert!((logits[0] - 2.8285).abs() < 5e-4);
    }

    #[test]
    fn constant_tokens_give_uniform_scores() {
        let o: Vec<f64> = (0..4).flat_map(|_| [0.5, -2.0, 1.0]).collect();
        let m = rand_vec(6, 1);
        let s = class_attention(&o, &m, 4, 2);
        assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let r = csra_features(&o, &s, 0.3, 4);
        for row in r.chunks(3) {
            for (a, b) in row.iter().zip([0.5, -2.0, 1.0]) {
                assert!((a - 1.3 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_lambda_is_gap_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = CsraHead::<f64>::new(5, 6, 0.0, &mut rng);
        let o = rand_vec(2 * 7 * 6, 4);
        let (logits, _) = head.forward(&o, 2, false);
        for b in 0..2 {
            let g = position_mean(&o[b * 42..(b + 1) * 42], 7);
            for i in 0..5 {
                let want: f64 = head.class_weights.value[i * 6..(i + 1) * 6].iter().zip(&g).map(|(a, b)| a * b).sum();
                assert!((logits[b * 5 + i] - want).abs() < 1e-12);
            }
        }
        let s = class_attention(&o[..42], &head.class_weights.value, 7, 5);
        let r = csra_features(&o[..42], &s, 0.0, 7);
        let g = position_mean(&o[..42], 7);
        for row in r.chunks(6) {
            assert_eq!(row, &g[..]);
        }
    }

    #[test]
    fn zero_tokens_give_half_probabilities() {
        let head = CsraHead::<f64>::new(3, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(5));
        let (logits, _) = head.forward(&[0.0; 16], 1, false);
        assert!(logits.iter().all(|l| *l == 0.0));
        assert!(logits.iter().all(|l| sigmoid(*l) == 0.5));
    }

    #[test]
    fn logits_are_permutation_invariant() {
        let head = CsraHead::<f64>::new(3, 5, 0.3, &mut ChaCha8Rng::seed_from_u64(6));
        let o = rand_vec(4 * 5, 7);
        let perm = [3usize, 1, 0, 2];
        let op: Vec<f64> = perm.iter().flat_map(|&p| o[p * 5..(p + 1) * 5].to_vec()).collect();
        let (a, _) = head.forward(&o, 1, false);
        let (b, _) = head.forward(&op, 1, false);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut head = CsraHead::<f64>::new(3, 5, 0.3, &mut ChaCha8Rng::seed_from_u64(8));
        let batch = 2;
        let o = rand_vec(batch * 4 * 5, 9);
        let w = rand_vec(batch * 3, 10);
        let loss = |h: &CsraHead<f64>, o: &[f64]| -> f64 { h.forward(o, batch, false).0.iter().zip(&w).map(|(a, b)| a * b).sum() };
        let (_, cache) = head.forward(&o, batch, true);
        let dtok = head.backward(cache.as_ref().unwrap(), &w);
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        for i in 0..o.len() {
            let (mut p, mut m) = (o.clone(), o.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&head, &p) - loss(&head, &m)) / (2.0 * h);
            assert!(rel(fd, dtok[i]) < 1e-4);
        }
        for k in 0..15 {
            let mut hp = head.clone();
            hp.class_weights.value[k] += h;
            let mut hm = head.clone();
            hm.class_weights.value[k] -= h;
            let fd = (loss(&hp, &o) - loss(&hm, &o)) / (2.0 * h);
            assert!(rel(fd, head.class_weights.grad[k]) < 1e-4);
        }
    }
}
