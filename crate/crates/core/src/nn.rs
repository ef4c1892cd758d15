//! Parameter containers for the small networks used throughout the crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Var};
use crate::error::Result;
use crate::math;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Anything that owns trainable tensors in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Stable names, parallel to [`Module::params`].
    fn param_names(&self) -> Vec<String>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Binds all parameters on `tape` in order.
    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        tape.bind(&self.params(), requires_grad)
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init with variance `gain^2 / fan_in`.
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let bound = gain * math::sqrt(3.0 / fan_in as f64);
        Self { weight: uniform(rng, &[fan_in, fan_out], bound), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, vars[0], vars[1])
    }

    /// Plain evaluation on a single input row.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (w, b) = (self.weight.data(), self.bias.data());
        let m = self.fan_out();
        out.copy_from_slice(b);
        for (i, &xi) in x.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&w[i * m..(i + 1) * m]) {
                *o += xi * wv;
            }
        }
    }
}

/// Square-kernel convolution parameters, `weight: [out, in, k, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, gain: f64) -> Self {
        let bound = gain * math::sqrt(3.0 / (c_in * k * k) as f64);
        Self { weight: uniform(rng, &[c_out, c_in, k, k], bound), bias: Tensor::zeros(&[c_out]), stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[0], vars[1], self.stride, self.pad)
    }
}

/// Transposed convolution parameters, `weight: [in, out, k, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, gain: f64) -> Self {
        // each output pixel sees roughly c_in * (k / stride)^2 taps
        let taps = (c_in * k * k / (stride * stride)).max(1);
        let bound = gain * math::sqrt(3.0 / taps as f64);
        Self { weight: uniform(rng, &[c_in, c_out, k, k], bound), bias: Tensor::zeros(&[c_out]), stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, vars[0], vars[1], self.stride, self.pad)
    }
}

/// Collects `(weight, bias)` pairs of a layer list under `prefix.{i}`.
pub(crate) fn layer_names(prefix: &str, layers: usize) -> Vec<String> {
    (0..layers)
        .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
        .collect()
}

pub(crate) fn linear_params(layers: &[Linear]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

pub(crate) fn linear_params_mut(layers: &mut [Linear]) -> Vec<&mut Tensor> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

pub(crate) fn conv_params(layers: &[Conv2d]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

pub(crate) fn conv_params_mut(layers: &mut [Conv2d]) -> Vec<&mut Tensor> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

/// Constant one-hot rows for `classes`.
pub fn one_hot(tape: &mut Tape, classes: &[usize], n_classes: usize) -> Var {
    let mut data = alloc::vec![0.0; classes.len() * n_classes];
    for (r, &c) in classes.iter().enumerate() {
        data[r * n_classes + c] = 1.0;
    }
    tape.constant(Tensor::new(&[classes.len(), n_classes], data).expect("one-hot shape"))
}
