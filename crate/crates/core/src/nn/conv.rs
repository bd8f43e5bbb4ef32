use rand::Rng;

use super::{gemm, Mat, MatMut, Module, Param, Real};

/// Stride-1 1D convolution without bias over a `(C, B * L)` activation.
///
/// Output length equals input length: `pad_left` cells of zero padding go before
/// each sample and `kernel - 1 - pad_left` after it.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    /// Shape `(out, in, kernel)`.
    pub weight: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad_left: usize,
}

impl<T: Real> Conv1d<T> {
    /// He-uniform initialisation.
    pub fn new<R: Rng + ?Sized>(name: &str, in_channels: usize, out_channels: usize, kernel: usize, pad_left: usize, rng: &mut R) -> Self {
        assert!(kernel >= 1 && pad_left < kernel);
        let fan_in = (in_channels * kernel) as f64;
        let weight = Param::uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel],
            (6.0 / fan_in).sqrt(),
            rng,
        );
        Self { weight, in_channels, out_channels, kernel, pad_left }
    }

    /// "Same" padding, with any odd cell going to the right.
    pub fn same<R: Rng + ?Sized>(name: &str, in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(name, in_channels, out_channels, kernel, (kernel - 1) / 2, rng)
    }

    fn im2col(&self, x: &[T], batch: usize, len: usize) -> Vec<T> {
        let n = batch * len;
        let mut col = vec![T::zero(); self.in_channels * self.kernel * n];
        for ci in 0..self.in_channels {
            for j in 0..self.kernel {
                let row = &mut col[(ci * self.kernel + j) * n..][..n];
                let shift = j as isize - self.pad_left as isize;
                for b in 0..batch {
                    let src = &x[ci * n + b * len..][..len];
                    let dst = &mut row[b * len..][..len];
                    copy_shifted(src, dst, shift);
                }
            }
        }
        col
    }

    /// `x` has shape `(in_channels, batch * len)`.
    pub fn forward(&self, x: &[T], batch: usize, len: usize) -> Vec<T> {
        let n = batch * len;
        assert_eq!(x.len(), self.in_channels * n, "conv input shape");
        let ck = self.in_channels * self.kernel;
        let mut y = vec![T::zero(); self.out_channels * n];
        let w = Mat::new(&self.weight.value, self.out_channels, ck);
        if self.kernel == 1 {
            gemm(T::one(), w, Mat::new(x, ck, n), T::zero(), MatMut::new(&mut y, self.out_channels, n));
        } else {
            let col = self.im2col(x, batch, len);
            gemm(T::one(), w, Mat::new(&col, ck, n), T::zero(), MatMut::new(&mut y, self.out_channels, n));
        }
        y
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, x: &[T], batch: usize, len: usize, dy: &[T]) -> Vec<T> {
        let n = batch * len;
        assert_eq!(dy.len(), self.out_channels * n, "conv output grad shape");
        let ck = self.in_channels * self.kernel;
        let owned;
        let col: &[T] = if self.kernel == 1 {
            x
        } else {
            owned = self.im2col(x, batch, len);
            &owned
        };
        let dym = Mat::new(dy, self.out_channels, n);
        gemm(
            T::one(),
            dym,
            Mat::new(col, ck, n).t(),
            T::one(),
            MatMut::new(&mut self.weight.grad, self.out_channels, ck),
        );
        let mut dcol = vec![T::zero(); ck * n];
        gemm(
            T::one(),
            Mat::new(&self.weight.value, self.out_channels, ck).t(),
            dym,
            T::zero(),
            MatMut::new(&mut dcol, ck, n),
        );
        if self.kernel == 1 {
            return dcol;
        }
        let mut dx = vec![T::zero(); self.in_channels * n];
        for ci in 0..self.in_channels {
            for j in 0..self.kernel {
                let row = &dcol[(ci * self.kernel + j) * n..][..n];
                let shift = j as isize - self.pad_left as isize;
                for b in 0..batch {
                    let src = &row[b * len..][..len];
                    let dst = &mut dx[ci * n + b * len..][..len];
                    add_unshifted(src, dst, shift);
                }
            }
        }
        dx
    }
}

/// `dst[t] = src[t + shift]` where in range, zero elsewhere (already zeroed).
fn copy_shifted<T: Copy>(src: &[T], dst: &mut [T], shift: isize) {
    let len = src.len() as isize;
    let lo = (-shift).max(0);
    let hi = (len - shift).min(len);
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let s0 = (lo as isize + shift) as usize;
        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
    }
}

/// Adjoint of [`copy_shifted`]: `dst[t + shift] += src[t]`.
fn add_unshifted<T: Real>(src: &[T], dst: &mut [T], shift: isize) {
    let len = src.len() as isize;
    let lo = (-shift).max(0);
    let hi = (len - shift).min(len);
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let s0 = (lo as isize + shift) as usize;
        for (d, s) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
            *d += *s;
        }
    }
}

impl<T: Real> Module<T> for Conv1d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}
