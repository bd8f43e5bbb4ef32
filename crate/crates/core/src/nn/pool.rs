use super::Real;

/// Max pooling along the time axis of a `(rows, B * L)` activation, with
/// `-inf` padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    /// Flat input index of the winner for every output cell.
    argmax: Vec<u32>,
    input_len: usize,
}

impl MaxPool1d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1 && padding < kernel);
        Self { kernel, stride, padding }
    }

    pub fn out_len(&self, len: usize) -> usize {
        let span = len + 2 * self.padding;
        if span < self.kernel {
            0
        } else {
            (span - self.kernel) / self.stride + 1
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], rows: usize, batch: usize, len: usize) -> (Vec<T>, PoolCache) {
        assert_eq!(x.len(), rows * batch * len, "pool input shape");
        let lo = self.out_len(len);
        let mut y = vec![T::zero(); rows * batch * lo];
        let mut argmax = vec![0u32; y.len()];
        for r in 0..rows {
            for b in 0..batch {
                let base = r * batch * len + b * len;
                let src = &x[base..][..len];
                let obase = r * batch * lo + b * lo;
                for o in 0..lo {
                    let start = (o * self.stride) as isize - self.padding as isize;
                    let s = start.max(0) as usize;
                    let e = ((start + self.kernel as isize) as usize).min(len);
                    let mut best = s;
                    for t in s + 1..e {
                        if src[t] > src[best] {
                            best = t;
                        }
                    }
                    y[obase + o] = src[best];
                    argmax[obase + o] = (base + best) as u32;
                }
            }
        }
        (y, PoolCache { argmax, input_len: x.len() })
    }

    pub fn backward<T: Real>(&self, cache: &PoolCache, dy: &[T]) -> Vec<T> {
        let mut dx = vec![T::zero(); cache.input_len];
        for (g, &i) in dy.iter().zip(&cache.argmax) {
            dx[i as usize] += *g;
        }
        dx
    }
}
