//! Two-headed discriminator, frozen teacher, adversarial and regularization
//! losses, and the alternating training step.

mod data;
mod losses;
mod train;

pub use data::{extract_patch, RealDataset, RealImage};
pub use losses::{
    adv_losses, discriminator_loss, distill_loss, generator_loss, r1_penalty, r1_value, DiscriminatorLossParts,
    GeneratorLossParts, LossWeights, R1,
};
pub use train::{
    CameraReg, FakeBatch, Generator, GeneratorVars, ModelConfig, StepMetrics, TrainConfig, TrainState,
};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{conv_params, conv_params_mut, layer_names, one_hot, Conv2d, Linear, Module, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Channels of a discriminator sample: RGB and depth.
pub const SAMPLE_CHANNELS: usize = 4;
/// Constant patch-parameter channels appended to every sample.
pub const PSI_CHANNELS: usize = 3;

const GAIN: f64 = core::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    pub channels: [usize; 3],
    pub feature_dim: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 32], feature_dim: 64 }
    }
}

/// Convolutional trunk over `[B, 4 + 3, h, w]` with a score head
/// (plus a class projection term) and a feature head regressing the teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub fc: Linear,
    pub score: Linear,
    /// `[n_classes, feature_dim]`.
    pub embed: Tensor,
    pub feature: Linear,
    pub res: (usize, usize),
    pub n_classes: usize,
}

fn strided(n: usize) -> usize {
    n.div_ceil(2)
}

impl Discriminator {
    pub fn new(rng: &mut impl Rng, cfg: &DiscConfig, res: (usize, usize), n_classes: usize, teacher_dim: usize) -> Self {
        let [c1, c2, c3] = cfg.channels;
        let convs = vec![
            Conv2d::new(rng, SAMPLE_CHANNELS + PSI_CHANNELS, c1, 3, 1, 1, GAIN),
            Conv2d::new(rng, c1, c2, 3, 2, 1, GAIN),
            Conv2d::new(rng, c2, c3, 3, 2, 1, GAIN),
        ];
        let flat = c3 * strided(strided(res.0)) * strided(strided(res.1));
        let f = cfg.feature_dim;
        let bound = crate::math::sqrt(3.0 / f as f64);
        let embed = (0..n_classes * f).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            convs,
            fc: Linear::new(rng, flat, f, GAIN),
            score: Linear::new(rng, f, 1, 1.0),
            embed: Tensor::new(&[n_classes, f], embed).expect("embedding shape"),
            feature: Linear::new(rng, f, teacher_dim, 1.0),
            res,
            n_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc.fan_out()
    }

    pub fn teacher_dim(&self) -> usize {
        self.feature.fan_out()
    }

    /// `x: [B, 4, h, w]`, one class and patch triple per sample. Returns
    /// `(score [B], features [B, teacher_dim])`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, classes: &[usize], psi: &[[f64; 3]]) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != SAMPLE_CHANNELS || (s[2], s[3]) != self.res || classes.len() != s[0] || psi.len() != s[0] {
            return Err(shape_err(
                "Discriminator::forward",
                format!("input {s:?} for resolution {:?}, {} classes, {} patches", self.res, classes.len(), psi.len()),
            ));
        }
        let (b, hw) = (s[0], s[2] * s[3]);
        let psi_data: Vec<f64> = psi.iter().flat_map(|p| p.iter().flat_map(|&v| core::iter::repeat_n(v, hw))).collect();
        let pv = tape.constant(Tensor::new(&[b, PSI_CHANNELS, s[2], s[3]], psi_data)?);
        let mut h = tape.concat(1, &[x, pv])?;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(tape, &vars[2 * i..2 * i + 2], h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let flat: usize = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[b, flat])?;
        let f = Linear::forward(tape, &vars[6..8], h)?;
        let f = tape.leaky_relu(f, LEAKY_SLOPE);
        let base = Linear::forward(tape, &vars[8..10], f)?;
        let base = tape.reshape(base, &[b])?;
        let oh = one_hot(tape, classes, self.n_classes);
        let emb = tape.matmul(oh, vars[10])?;
        let prod = tape.mul(emb, f)?;
        let proj = tape.sum_last(prod);
        let score = tape.add(base, proj)?;
        let feat = Linear::forward(tape, &vars[11..13], f)?;
        Ok((score, feat))
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = conv_params(&self.convs);
        p.extend([&self.fc.weight, &self.fc.bias, &self.score.weight, &self.score.bias, &self.embed]);
        p.extend([&self.feature.weight, &self.feature.bias]);
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = conv_params_mut(&mut self.convs);
        p.extend([&mut self.fc.weight, &mut self.fc.bias, &mut self.score.weight, &mut self.score.bias, &mut self.embed]);
        p.extend([&mut self.feature.weight, &mut self.feature.bias]);
        p
    }
    fn param_names(&self) -> Vec<String> {
        let mut n = layer_names("disc.conv", self.convs.len());
        for s in ["disc.fc.weight", "disc.fc.bias", "disc.score.weight", "disc.score.bias", "disc.embed"] {
            n.push(String::from(s));
        }
        n.extend([String::from("disc.feature.weight"), String::from("disc.feature.bias")]);
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub channels: [usize; 2],
    pub dim: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { channels: [8, 16], dim: 16, seed: 0x7ea_c4e5 }
    }
}

/// Frozen random convolutional feature extractor on RGB, globally pooled.
/// Exposes no mutable access to its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherExtractor {
    convs: Vec<Conv2d>,
}

impl TeacherExtractor {
    pub fn new(cfg: &TeacherConfig) -> Self {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
        let [a, b] = cfg.channels;
        let convs = vec![
            Conv2d::new(&mut rng, 3, a, 3, 2, 1, GAIN),
            Conv2d::new(&mut rng, a, b, 3, 2, 1, GAIN),
            Conv2d::new(&mut rng, b, cfg.dim, 3, 1, 1, 1.0),
        ];
        Self { convs }
    }

    pub fn dim(&self) -> usize {
        self.convs[2].weight.shape()[0]
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        conv_params(&self.convs)
    }

    /// `rgb: [B, 3, h, w]` to `[B, dim]`.
    pub fn extract(&self, rgb: &Tensor) -> Result<Tensor> {
        let s = rgb.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(shape_err("TeacherExtractor::extract", format!("{s:?}")));
        }
        let mut tape = Tape::new();
        let vars = tape.bind(&self.weights(), false);
        let mut h = tape.constant(rgb.clone());
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&mut tape, &vars[2 * i..2 * i + 2], h)?;
            if i + 1 < self.convs.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        let hs = tape.shape(h).to_vec();
        let (b, d, n) = (hs[0], hs[1], hs[2] * hs[3]);
        let data = tape.data(h);
        let pooled = (0..b * d).map(|k| data[k * n..(k + 1) * n].iter().sum::<f64>() / n as f64).collect();
        Tensor::new(&[b, d], pooled)
    }
}

#[cfg(test)]
mod tests;
