//! Standard layers.

use std::cell::RefCell;

use rand::Rng;

use crate::ops::{batch_norm, conv2d, conv3d, linear};
use crate::{impl_module, init, Float, Param, Tensor, Var};

#[doc(hidden)]
pub use crate::param::join;

/// 3D convolution with "same" zero padding for odd kernels.
#[derive(Debug)]
pub struct Conv3d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}
impl_module!(Conv3d; weight, bias);

impl<T: Float> Conv3d<T> {
    pub fn new(cin: usize, cout: usize, k: [usize; 3], bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = cin * k.iter().product::<usize>();
        let weight = Param::new(init::fan_in_uniform(&[cout, cin, k[0], k[1], k[2]], fan_in, rng));
        let bias = bias.then(|| Param::new(init::fan_in_uniform(&[cout], fan_in, rng)));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let s = self.weight.value.shape();
        let pad = [s[2] / 2, s[3] / 2, s[4] / 2];
        conv3d(x, &self.weight.var(), self.bias.as_ref().map(|b| b.var()).as_ref(), pad)
    }
}

/// 2D convolution with "same" zero padding for odd kernels.
#[derive(Debug)]
pub struct Conv2d<T: Float> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}
impl_module!(Conv2d; weight, bias);

impl<T: Float> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = cin * k * k;
        let weight = Param::new(init::fan_in_uniform(&[cout, cin, k, k], fan_in, rng));
        let bias = bias.then(|| Param::new(init::fan_in_uniform(&[cout], fan_in, rng)));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let s = self.weight.value.shape();
        let pad = [s[2] / 2, s[3] / 2];
        conv2d(x, &self.weight.var(), self.bias.as_ref().map(|b| b.var()).as_ref(), pad)
    }
}

/// Batch norm over axis 1 with running estimates.
#[derive(Debug)]
pub struct BatchNorm<T: Float> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: RefCell<Param<T>>,
    pub running_var: RefCell<Param<T>>,
    pub momentum: f64,
    pub eps: f64,
}
impl_module!(BatchNorm; weight, bias, running_mean, running_var);

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::new(Tensor::ones(&[channels])),
            bias: Param::new(Tensor::zeros(&[channels])),
            running_mean: RefCell::new(Param::buffer(Tensor::zeros(&[channels]))),
            running_var: RefCell::new(Param::buffer(Tensor::ones(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Batch statistics (and a running-estimate update) when `train`, running estimates otherwise.
    pub fn forward(&self, x: &Var<T>, train: bool) -> Var<T> {
        let (g, b) = (self.weight.var(), self.bias.var());
        let eps = T::lit(self.eps);
        if !train {
            let rm = self.running_mean.borrow();
            let rv = self.running_var.borrow();
            return batch_norm(x, &g, &b, Some((&rm.value, &rv.value)), eps).0;
        }
        let (y, stats) = batch_norm(x, &g, &b, None, eps);
        let stats = stats.expect("training batch norm returns statistics");
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let mut rm = self.running_mean.borrow_mut();
        rm.value.data_mut().iter_mut().zip(&stats.mean).for_each(|(r, &s)| *r = keep * *r + m * s);
        let mut rv = self.running_var.borrow_mut();
        rv.value.data_mut().iter_mut().zip(&stats.var_unbiased).for_each(|(r, &s)| *r = keep * *r + m * s);
        y
    }
}

/// Fully connected layer over the last axis.
#[derive(Debug)]
pub struct Linear<T: Float> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}
impl_module!(Linear; weight, bias);

impl<T: Float> Linear<T> {
    pub fn new(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(init::fan_in_uniform(&[fout, fin], fin, rng)),
            bias: Param::new(init::fan_in_uniform(&[fout], fin, rng)),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        linear(x, &self.weight.var(), Some(&self.bias.var()))
    }
}

/// Channel gating: global pool, bottleneck MLP, sigmoid, rescale.
#[derive(Debug)]
pub struct SqueezeExcite<T: Float> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
impl_module!(SqueezeExcite; fc1, fc2);

impl<T: Float> SqueezeExcite<T> {
    pub fn new(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        Self { fc1: Linear::new(channels, hidden, rng), fc2: Linear::new(hidden, channels, rng) }
    }

    /// Per-channel gates in (0, 1), shape (B, C).
    pub fn gates(&self, x: &Var<T>) -> Var<T> {
        self.fc2.forward(&self.fc1.forward(&x.global_avg_pool()).relu()).sigmoid()
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.mul_channel(&self.gates(x))
    }
}
