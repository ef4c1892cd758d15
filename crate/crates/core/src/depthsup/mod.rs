//! Adversarial depth supervision: the depth adaptor, stochastic selection
//! of the depth map shown to the discriminator, real-depth normalization and
//! a simulated monocular depth estimator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::math;
use crate::nn::{conv_params, conv_params_mut, layer_names, Conv2d, Module, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const ADAPTOR_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptorConfig {
    pub filters: usize,
    pub kernel: usize,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self { filters: 16, kernel: 5 }
    }
}

/// Three `k x k` convolutions with a shared 1x1 head read out after each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAdaptor {
    pub layers: Vec<Conv2d>,
    pub head: Conv2d,
}

impl DepthAdaptor {
    pub fn new(rng: &mut impl Rng, cfg: &AdaptorConfig) -> Result<Self> {
        if cfg.kernel.is_multiple_of(2) || cfg.filters == 0 {
            return Err(invalid("adaptor kernel must be odd and filters nonzero"));
        }
        let pad = cfg.kernel / 2;
        let f = cfg.filters;
        let layers = (0..ADAPTOR_LAYERS)
            .map(|i| Conv2d::new(rng, if i == 0 { 1 } else { f }, f, cfg.kernel, 1, pad, core::f64::consts::SQRT_2))
            .collect();
        Ok(Self { layers, head: Conv2d::new(rng, f, 1, 1, 1, 0, 1.0) })
    }

    /// `d: [B, 1, h, w]` to three adapted maps of the same shape, each in `[-1, 1]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], d: Var) -> Result<[Var; ADAPTOR_LAYERS]> {
        let s = tape.shape(d);
        if s.len() != 4 || s[1] != 1 {
            return Err(shape_err("DepthAdaptor::forward", format!("{s:?}")));
        }
        let head = &vars[2 * ADAPTOR_LAYERS..2 * ADAPTOR_LAYERS + 2];
        let mut h = d;
        let mut outs = [d; ADAPTOR_LAYERS];
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &vars[2 * i..2 * i + 2], h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            let o = self.head.forward(tape, head, h)?;
            outs[i] = tape.tanh(o);
        }
        Ok(outs)
    }
}

impl Module for DepthAdaptor {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = conv_params(&self.layers);
        p.extend([&self.head.weight, &self.head.bias]);
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = conv_params_mut(&mut self.layers);
        p.extend([&mut self.head.weight, &mut self.head.bias]);
        p
    }
    fn param_names(&self) -> Vec<String> {
        let mut n = layer_names("adaptor.conv", self.layers.len());
        n.extend([String::from("adaptor.head.weight"), String::from("adaptor.head.bias")]);
        n
    }
}

/// Which depth map a fake sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DepthChoice {
    Raw,
    Adapted(usize),
}

impl DepthChoice {
    /// Channel in the stacked `[raw, a1, a2, a3]` layout.
    pub fn index(self) -> usize {
        match self {
            DepthChoice::Raw => 0,
            DepthChoice::Adapted(k) => k + 1,
        }
    }
}

/// Shows the raw normalized depth with probability `p_raw`, otherwise one of
/// the adapted maps uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub p_raw: f64,
}

impl SelectionPolicy {
    pub fn new(p_raw: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_raw) {
            return Err(invalid(format!("P(raw depth) must be in [0, 1], got {p_raw}")));
        }
        Ok(Self { p_raw })
    }

    pub fn probabilities(&self) -> [f64; 1 + ADAPTOR_LAYERS] {
        let rest = (1.0 - self.p_raw) / ADAPTOR_LAYERS as f64;
        [self.p_raw, rest, rest, rest]
    }

    pub fn choose(&self, rng: &mut impl Rng) -> DepthChoice {
        // both draws are always taken so the stream does not depend on p_raw
        let u: f64 = rng.random();
        let k = rng.random_range(0..ADAPTOR_LAYERS);
        if u < self.p_raw {
            DepthChoice::Raw
        } else {
            DepthChoice::Adapted(k)
        }
    }
}

/// Per-sample choice between `raw` and the adapted maps, all `[B, 1, h, w]`.
pub fn select_depth(tape: &mut Tape, raw: Var, adapted: &[Var; ADAPTOR_LAYERS], choices: &[DepthChoice]) -> Result<Var> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 4 || shape[0] != choices.len() || shape[1] != 1 {
        return Err(shape_err("select_depth", format!("{shape:?} with {} choices", choices.len())));
    }
    let (b, hw) = (shape[0], shape[2] * shape[3]);
    let stacked = tape.concat(1, &[raw, adapted[0], adapted[1], adapted[2]])?;
    let idx: Vec<usize> = (0..b).flat_map(|i| {
        let base = (i * 4 + choices[i].index()) * hw;
        base..base + hw
    }).collect();
    let flat = tape.gather(stacked, &idx)?;
    tape.reshape(flat, &shape)
}

/// Affine map of `(min, max)` onto `(-1, 1)`; constant maps become zeros.
pub fn normalize_real_depth(d: &[f64]) -> Vec<f64> {
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return vec![0.0; d.len()];
    }
    d.iter().map(|&v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    /// Gaussian blur standard deviation in pixels.
    pub blur_sigma: f64,
    pub noise_std: f64,
    /// Blend weight of the monotone value remap, in `[0, 1]`.
    pub remap_strength: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { blur_sigma: 1.0, noise_std: 0.005, remap_strength: 0.3 }
    }
}

impl CorruptionConfig {
    pub fn none() -> Self {
        Self { blur_sigma: 0.0, noise_std: 0.0, remap_strength: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.blur_sigma, self.noise_std, self.remap_strength].iter().all(|v| *v >= 0.0 && v.is_finite())
            && self.remap_strength <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(invalid("corruption parameters must be nonnegative and remap strength at most 1"))
        }
    }
}

/// Whole-sample symmetric reflection of index `i` into `0..n`.
fn mirror(i: isize, n: usize) -> usize {
    let p = 2 * n as isize;
    let m = i.rem_euclid(p);
    if m < n as isize {
        m as usize
    } else {
        (p - 1 - m) as usize
    }
}

/// Separable gaussian blur with symmetric edge reflection; the kernel is
/// normalized, so the image mean is preserved.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = math::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| math::exp(-((k * k) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * img[y * w + mirror(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[mirror(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Strictly increasing concave curve on `[0, 1]` fixing both endpoints.
fn remap_unit(u: f64) -> f64 {
    (1.0 - math::exp(-3.0 * u)) / (1.0 - math::exp(-3.0))
}

/// Blur, then monotone remap on the map's own value range, then additive
/// gaussian noise.
pub fn simulate_estimated_depth(depth: &[f64], h: usize, w: usize, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    cfg.validate()?;
    if depth.len() != h * w {
        return Err(shape_err("simulate_estimated_depth", format!("{} values for {h}x{w}", depth.len())));
    }
    let mut d = gaussian_blur(depth, h, w, cfg.blur_sigma);
    if cfg.remap_strength > 0.0 {
        let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if hi > lo {
            let a = cfg.remap_strength;
            for v in d.iter_mut() {
                let r = lo + (hi - lo) * remap_unit((*v - lo) / (hi - lo));
                *v = (1.0 - a) * *v + a * r;
            }
        }
    }
    if cfg.noise_std > 0.0 {
        for v in d.iter_mut() {
            *v += cfg.noise_std * math::std_normal(rng);
        }
    }
    Ok(d)
}
