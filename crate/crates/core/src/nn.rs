//! Parameterized layers: linear, 2-D convolution, batch normalization.

use rand::Rng;

use crate::autograd::{Graph, Var, BN_EPS};
use crate::error::{dim_err, Result};
use crate::param::{Module, Param};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(±sqrt(6 / fan_in))`, for weights feeding a ReLU.
    KaimingUniform,
    /// `U(±sqrt(6 / (fan_in + fan_out)))`.
    XavierUniform,
}

impl Init {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
        let bound = match self {
            Init::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        Tensor::uniform(shape, -bound, bound, rng)
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_f: usize, out_f: usize, bias: bool, init: Init, rng: &mut R) -> Self {
        let weight = Param::new(format!("{name}.weight"), init.sample(&[out_f, in_f], in_f, out_f, rng));
        let bias = bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_f])));
        Self { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x[batch×in] · Wᵀ + b`
    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.in_features() {
            return Err(dim_err(format!(
                "linear layer {} expects [batch, {}], got {s:?}",
                self.weight.name(),
                self.in_features()
            )));
        }
        let y = x.matmul_t(&g.param(&self.weight))?;
        match &self.bias {
            Some(b) => y.add(&g.param(b)),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let fan_out = out_c * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            init.sample(&[out_c, in_c, kernel, kernel], fan_in, fan_out, rng),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        Self { weight, bias, stride, padding }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        x.conv2d(&w, b.as_ref(), self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }
}

/// Batch normalization over axis 1 of `[N, C, ...]` inputs (so it serves as
/// both the 1-d and 2-d variant).
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        x.batch_norm(&g.param(&self.gamma), &g.param(&self.beta), &self.running_mean, &self.running_var, self.eps)
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn params(&self) -> Vec<Param<T>> {
        vec![self.gamma.clone(), self.beta.clone(), self.running_mean.clone(), self.running_var.clone()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg(usize),
    Max(usize),
    GlobalAvg,
}

pub fn pool2d<'g, T: Scalar>(kind: PoolKind, x: &Var<'g, T>) -> Result<Var<'g, T>> {
    match kind {
        PoolKind::Avg(k) => x.avg_pool2d(k),
        PoolKind::Max(k) => x.max_pool2d(k),
        PoolKind::GlobalAvg => x.global_avg_pool(),
    }
}
