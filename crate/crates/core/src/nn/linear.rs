use rand::Rng;

use super::{gemm, Mat, MatMut, Module, Param, Real};

/// `y = x W (+ b)` over rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// Shape `(in, out)`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub inputs: usize,
    pub outputs: usize,
}

impl<T: Real> Linear<T> {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Param::uniform(format!("{name}.weight"), &[inputs, outputs], bound, rng);
        let bias = bias.then(|| Param::uniform(format!("{name}.bias"), &[outputs], bound, rng));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        assert_eq!(x.len(), rows * self.inputs, "linear input shape");
        let mut y = vec![T::zero(); rows * self.outputs];
        gemm(
            T::one(),
            Mat::new(x, rows, self.inputs),
            Mat::new(&self.weight.value, self.inputs, self.outputs),
            T::zero(),
            MatMut::new(&mut y, rows, self.outputs),
        );
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(self.outputs) {
                for (v, bv) in row.iter_mut().zip(&b.value) {
                    *v += *bv;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &[T], rows: usize, dy: &[T]) -> Vec<T> {
        assert_eq!(dy.len(), rows * self.outputs, "linear output grad shape");
        gemm(
            T::one(),
            Mat::new(x, rows, self.inputs).t(),
            Mat::new(dy, rows, self.outputs),
            T::one(),
            MatMut::new(&mut self.weight.grad, self.inputs, self.outputs),
        );
        if let Some(b) = &mut self.bias {
            for row in dy.chunks_exact(self.outputs) {
                for (g, d) in b.grad.iter_mut().zip(row) {
                    *g += *d;
                }
            }
        }
        let mut dx = vec![T::zero(); rows * self.inputs];
        gemm(
            T::one(),
            Mat::new(dy, rows, self.outputs),
            Mat::new(&self.weight.value, self.inputs, self.outputs).t(),
            T::zero(),
            MatMut::new(&mut dx, rows, self.inputs),
        );
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
