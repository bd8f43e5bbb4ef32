use super::Real;

pub fn leaky_relu<T: Real>(x: &mut [T], slope: T) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
}

/// Gradient through a leaky ReLU given its output `y`; valid for a positive slope
/// since the output keeps the sign of the input.
pub fn leaky_relu_backward<T: Real>(y: &[T], dy: &mut [T], slope: T) {
    for (g, v) in dy.iter_mut().zip(y) {
        if *v < T::zero() {
            *g = *g * slope;
        }
    }
}

pub fn relu<T: Real>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// In-place softmax of each row of width `cols`.
pub fn softmax_rows<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Turns `dy` into the gradient with respect to the softmax input, given outputs `y`.
pub fn softmax_backward<T: Real>(y: &[T], dy: &mut [T], cols: usize) {
    for (yr, gr) in y.chunks_exact(cols).zip(dy.chunks_exact_mut(cols)) {
        let dot: T = yr.iter().zip(gr.iter()).map(|(a, b)| *a * *b).sum();
        for (g, v) in gr.iter_mut().zip(yr) {
            *g = *v * (*g - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_normalize_and_survive_large_logits() {
        let mut x = vec![1000.0f64, 1001.0, 999.0, -3.0, 0.0, 3.0];
        softmax_rows(&mut x, 3);
        for row in x.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(x[1] > x[0] && x[0] > x[2]);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let x = vec![0.3f64, -1.2, 0.7];
        let w = [0.5, -2.0, 1.5];
        let f = |x: &[f64]| {
            let mut y = x.to_vec();
            softmax_rows(&mut y, 3);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = x.clone();
        softmax_rows(&mut y, 3);
        let mut g = w.to_vec();
        softmax_backward(&y, &mut g, 3);
        for i in 0..3 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn leaky_relu_roundtrip() {
        let mut x = vec![-2.0f64, 0.0, 3.0];
        leaky_relu(&mut x, 0.01);
        assert_eq!(x, vec![-0.02, 0.0, 3.0]);
        let mut g = vec![1.0, 1.0, 1.0];
        leaky_relu_backward(&x, &mut g, 0.01);
        assert_eq!(g, vec![0.01, 1.0, 1.0]);
    }
}
