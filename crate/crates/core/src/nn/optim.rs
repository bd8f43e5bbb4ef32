use serde::{Deserialize, Serialize};

use super::{Module, Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are matched to parameters by visit order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (ob1, ob2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let step_size = T::c(c.lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(c.eps);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_mut(&mut |p: &mut Param<T>| {
            if !p.is_trainable() {
                return;
            }
            if m_all.len() <= idx {
                m_all.push(vec![T::zero(); p.len()]);
                v_all.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            assert_eq!(m.len(), p.len(), "optimizer state does not match parameter {}", p.name);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                let vhat = v[i] * inv_bc2;
                p.value[i] -= step_size * m[i] / (vhat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}
