//! Learnable parameter containers, initializers, and tape binding.
//!
//! Every container exposes an ordered traversal (`for_each` /
//! `for_each_mut`) and a `bind` that pushes tensors onto a tape in the same
//! order. Checkpoint records, Adam moments and gradient collection all rely
//! on this single ordering.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tape, Var};

/// Convolution kernel [Co,Ci,kh,kw] plus bias [Co].
#[derive(Clone, Debug)]
pub struct Conv2dParams<S: Scalar> {
    pub weight: ArrayD<S>,
    pub bias: ArrayD<S>,
}

#[derive(Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl<S: Scalar> Conv2dParams<S> {
    /// He-uniform weights, zero bias.
    pub fn he_uniform(co: usize, ci: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (ci * kh * kw) as f64;
        let limit = (6.0 / fan_in).sqrt();
        Conv2dParams {
            weight: uniform(&[co, ci, kh, kw], limit, rng),
            bias: ArrayD::zeros(IxDyn(&[co])),
        }
    }

    pub fn zeros(co: usize, ci: usize, kh: usize, kw: usize) -> Self {
        Conv2dParams {
            weight: ArrayD::zeros(IxDyn(&[co, ci, kh, kw])),
            bias: ArrayD::zeros(IxDyn(&[co])),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn bind(&self, tape: &mut Tape<S>, order: &mut Vec<Var>) -> ConvVars {
        let weight = tape.param(self.weight.clone());
        let bias = tape.param(self.bias.clone());
        order.push(weight);
        order.push(bias);
        ConvVars { weight, bias }
    }
}

/// Dense (fully connected) map [di,do] plus bias [do].
#[derive(Clone, Debug)]
pub struct LinearParams<S: Scalar> {
    pub weight: ArrayD<S>,
    pub bias: ArrayD<S>,
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<S: Scalar> LinearParams<S> {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier_uniform(di: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (di + dout) as f64).sqrt();
        LinearParams {
            weight: uniform(&[di, dout], limit, rng),
            bias: ArrayD::zeros(IxDyn(&[dout])),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn bind(&self, tape: &mut Tape<S>, order: &mut Vec<Var>) -> LinearVars {
        let weight = tape.param(self.weight.clone());
        let bias = tape.param(self.bias.clone());
        order.push(weight);
        order.push(bias);
        LinearVars { weight, bias }
    }
}

/// Layer-norm scale (ones) and shift (zeros).
#[derive(Clone, Debug)]
pub struct LayerNormParams<S: Scalar> {
    pub gamma: ArrayD<S>,
    pub beta: ArrayD<S>,
}

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gamma: ArrayD::ones(IxDyn(&[d])),
            beta: ArrayD::zeros(IxDyn(&[d])),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<S>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<S>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn bind(&self, tape: &mut Tape<S>, order: &mut Vec<Var>) -> LayerNormVars {
        let gamma = tape.param(self.gamma.clone());
        let beta = tape.param(self.beta.clone());
        order.push(gamma);
        order.push(beta);
        LayerNormVars { gamma, beta }
    }
}

fn uniform<S: Scalar>(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> ArrayD<S> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        S::from_float(rng.gen_range(-limit..limit))
    })
}
