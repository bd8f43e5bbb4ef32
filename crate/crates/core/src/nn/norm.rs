use super::{Module, Param, Real};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Batch normalisation over the columns of a `(C, N)` activation.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    /// Unbiased batch variance.
    var: Vec<T>,
}

impl<T: Real> BatchNorm1d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), &[channels], vec![T::zero(); channels]),
            running_var: Param::buffer(format!("{name}.running_var"), &[channels], vec![T::one(); channels]),
            channels,
        }
    }

    /// Normalises with batch statistics. Running estimates are left untouched
    /// until [`BatchNorm1d::update_running`].
    pub fn forward_train(&self, x: &[T]) -> (Vec<T>, BatchNormCache<T>) {
        let n = x.len() / self.channels;
        assert_eq!(x.len(), n * self.channels, "batch norm input shape");
        let nf = T::c(n as f64);
        let eps = T::c(BN_EPS);
        let mut means = vec![T::zero(); self.channels];
        let mut vars = vec![T::zero(); self.channels];
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let row = &x[c * n..][..n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[c] = is;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for ((h, o), v) in xhat[c * n..][..n].iter_mut().zip(&mut y[c * n..][..n]).zip(row) {
                *h = (*v - mean) * is;
                *o = g * *h + b;
            }
            means[c] = mean;
            vars[c] = if n > 1 { var * nf / T::c((n - 1) as f64) } else { var };
        }
        (y, BatchNormCache { xhat, inv_std, mean: means, var: vars })
    }

    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        let mom = T::c(BN_MOMENTUM);
        for c in 0..self.channels {
            let rm = &mut self.running_mean.value[c];
            *rm = (T::one() - mom) * *rm + mom * cache.mean[c];
            let rv = &mut self.running_var.value[c];
            *rv = (T::one() - mom) * *rv + mom * cache.var[c];
        }
    }

    pub fn forward_eval(&self, x: &[T]) -> Vec<T> {
        let n = x.len() / self.channels;
        let eps = T::c(BN_EPS);
        let mut y = x.to_vec();
        for c in 0..self.channels {
            let is = T::one() / (self.running_var.value[c] + eps).sqrt();
            let (m, g, b) = (self.running_mean.value[c], self.gamma.value[c], self.beta.value[c]);
            for v in &mut y[c * n..][..n] {
                *v = g * (*v - m) * is + b;
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &[T]) -> Vec<T> {
        let n = dy.len() / self.channels;
        let nf = T::c(n as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for c in 0..self.channels {
            let d = &dy[c * n..][..n];
            let h = &cache.xhat[c * n..][..n];
            let sum_d: T = d.iter().copied().sum();
            let sum_dh: T = d.iter().zip(h).map(|(a, b)| *a * *b).sum();
            self.gamma.grad[c] += sum_dh;
            self.beta.grad[c] += sum_d;
            let k = self.gamma.value[c] * cache.inv_std[c] / nf;
            for ((o, dv), hv) in dx[c * n..][..n].iter_mut().zip(d).zip(h) {
                *o = k * (nf * *dv - sum_d - *hv * sum_dh);
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm1d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Layer normalisation over each row of width `dim`.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[dim], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[dim]),
            dim,
        }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let df = T::c(d as f64);
        let eps = T::c(LN_EPS);
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..][..d];
            let mean = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / df;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = self.gamma.value[j] * h + self.beta.value[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
        let d = self.dim;
        let df = T::c(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        let mut dh = vec![T::zero(); d];
        for r in 0..dy.len() / d {
            let g = &dy[r * d..][..d];
            let h = &cache.xhat[r * d..][..d];
            for j in 0..d {
                self.gamma.grad[j] += g[j] * h[j];
                self.beta.grad[j] += g[j];
                dh[j] = g[j] * self.gamma.value[j];
            }
            let sum: T = dh.iter().copied().sum();
            let sum_h: T = dh.iter().zip(h).map(|(a, b)| *a * *b).sum();
            let k = cache.inv_std[r] / df;
            for j in 0..d {
                dx[r * d + j] = k * (df * dh[j] - sum - h[j] * sum_h);
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        for i in 0..x.len() {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-6, "coord {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn batch_norm_normalises_rows_and_tracks_running_stats() {
        let mut bn = BatchNorm1d::<f64>::new("bn", 2);
        let x = vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        let (y, cache) = bn.forward_train(&x);
        bn.update_running(&cache);
        let row0: f64 = y[..4].iter().sum();
        assert!(row0.abs() < 1e-12);
        assert!(y[4..].iter().all(|v| v.abs() < 1e-12));
        assert!((bn.running_mean.value[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var.value[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_gradient() {
        let x = vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.2];
        let w = [0.7, -0.3, 1.1, 0.2, -0.9, 0.4];
        let mut bn = BatchNorm1d::<f64>::new("bn", 2);
        bn.gamma.value = vec![1.3, 0.6];
        let f = |x: &[f64]| {
            let (y, _) = bn.forward_train(x);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut b = bn.clone();
        let (_, cache) = b.forward_train(&x);
        let dx = b.backward(&cache, &w);
        check_grad(f, &x, &dx);
    }

    #[test]
    fn layer_norm_gradient() {
        let x = vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.2];
        let w = [0.7, -0.3, 1.1, 0.2, -0.9, 0.4];
        let mut ln = LayerNorm::<f64>::new("ln", 3);
        ln.gamma.value = vec![1.3, 0.6, -0.4];
        ln.beta.value = vec![0.1, 0.2, 0.3];
        let f = |x: &[f64]| {
            let (y, _) = ln.forward(x);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = ln.forward(&x);
        let dx = ln.clone().backward(&cache, &w);
        check_grad(f, &x, &dx);
    }
}
