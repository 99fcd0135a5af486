//! Optimizers and learning-rate schedules.

use std::collections::HashMap;

use crate::{Float, Gradients, Module, Tensor};

/// Adam with bias correction.
#[derive(Debug)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<u64, (Tensor<T>, Tensor<T>)>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable param of `model` that has a gradient.
    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::lit(self.lr / c1);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (r1, r2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let c2s = T::lit(c2.sqrt());
        let eps = T::lit(self.eps);
        let moments = &mut self.moments;
        model.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            let Some(g) = grads.param(p.id()) else { return };
            let (m, v) = moments
                .entry(p.id())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            for (((w, &gi), mi), vi) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1t * *mi + r1 * gi;
                *vi = b2t * *vi + r2 * gi * gi;
                *w -= lr * *mi / ((*vi).sqrt() / c2s + eps);
            }
        });
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved (relative threshold) for more than `patience` epochs.
#[derive(Debug, Clone)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, threshold: 1e-4, min_lr: 0.0, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Returns the learning rate to use for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Param, Var};

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Param::<f64>::new(Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = p.var().square().sum().backward();
            opt.step(&mut p, &g);
        }
        assert!(p.value.data().iter().all(|v| v.abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Param::<f64>::new(Tensor::new(&[1], vec![1.0]));
        let mut opt = Adam::new(0.01);
        let g = p.var().scale(5.0).sum().backward();
        opt.step(&mut p, &g);
        assert!((p.value.item() - 0.99).abs() < 1e-9);
        let _ = Var::constant(Tensor::<f64>::scalar(0.0));
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut s = ReduceLrOnPlateau::new(0.8, 2);
        let mut lr = 1.0;
        lr = s.observe(1.0, lr);
        for _ in 0..2 {
            lr = s.observe(1.0, lr);
            assert_eq!(lr, 1.0);
        }
        lr = s.observe(1.0, lr);
        assert!((lr - 0.8).abs() < 1e-12);
    }
}
