//! Adaptive-moment gradient descent.

#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use crate::nn::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(store: &ParamStore<R>, lr: f64) -> Self {
        let zeros: Vec<Vec<R>> = store.iter().map(|(_, t)| vec![R::zero(); t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. `grads` is aligned with the store order.
    pub fn update(&mut self, store: &mut ParamStore<R>, grads: &[Vec<R>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let (one_b1, one_b2) = (R::of(1.0 - self.beta1), R::of(1.0 - self.beta2));
        let step_size = R::of(self.lr / c1);
        let inv_c2 = R::of(1.0 / c2);
        let eps = R::of(self.eps);
        for (((tensor, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((w, &g), m), v) in tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}
