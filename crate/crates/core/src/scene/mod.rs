//! Tri-plane scene generator: latent mapping, plane synthesis, feature
//! lookup and the small color/density decoder.

mod triplane;

pub use triplane::{lookup_tape, Lookup, TriPlane, PLANE_AXES};
pub(crate) use triplane::Footprint;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::math;
use crate::nn::{layer_names, linear_params, linear_params_mut, one_hot, ConvTranspose2d, Linear, Module, LEAKY_SLOPE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub z_dim: usize,
    pub n_classes: usize,
    pub w_dim: usize,
    pub mapping_width: usize,
    /// Feature channels per plane.
    pub plane_channels: usize,
    /// Plane resolution; must be a multiple of 8.
    pub plane_res: usize,
    pub synth_channels: usize,
    pub decoder_hidden: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            z_dim: 32,
            n_classes: 2,
            w_dim: 64,
            mapping_width: 64,
            plane_channels: 8,
            plane_res: 32,
            synth_channels: 32,
            decoder_hidden: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.plane_res < 8 || !self.plane_res.is_multiple_of(8) {
            return Err(invalid(format!("plane_res must be a positive multiple of 8, got {}", self.plane_res)));
        }
        if [self.z_dim, self.n_classes, self.w_dim, self.mapping_width, self.plane_channels, self.synth_channels, self.decoder_hidden]
            .contains(&0)
        {
            return Err(invalid("scene dimensions must be nonzero"));
        }
        Ok(())
    }
}

const RELU_GAIN: f64 = core::f64::consts::SQRT_2;

/// Two-layer MLP from `(z, one_hot(c))` to the style vector `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingNetwork {
    pub layers: Vec<Linear>,
    pub n_classes: usize,
}

impl MappingNetwork {
    pub fn new(rng: &mut impl Rng, cfg: &SceneConfig) -> Self {
        let layers = vec![
            Linear::new(rng, cfg.z_dim + cfg.n_classes, cfg.mapping_width, RELU_GAIN),
            Linear::new(rng, cfg.mapping_width, cfg.w_dim, RELU_GAIN),
        ];
        Self { layers, n_classes: cfg.n_classes }
    }

    pub fn z_dim(&self) -> usize {
        self.layers[0].fan_in() - self.n_classes
    }

    pub fn w_dim(&self) -> usize {
        self.layers[1].fan_out()
    }

    /// `z: [B, z_dim]`, one class per row.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z: Var, classes: &[usize]) -> Result<Var> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.n_classes) {
            return Err(invalid(format!("class {c} out of range for {} classes", self.n_classes)));
        }
        let oh = one_hot(tape, classes, self.n_classes);
        let mut h = tape.concat(1, &[z, oh])?;
        for (i, _) in self.layers.iter().enumerate() {
            h = Linear::forward(tape, &vars[2 * i..2 * i + 2], h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    /// Plain evaluation for one latent.
    pub fn map(&self, z: &[f64], class: usize) -> Result<Vec<f64>> {
        if class >= self.n_classes || z.len() != self.z_dim() {
            return Err(invalid("map_latent: bad class or latent size"));
        }
        let mut x = z.to_vec();
        x.extend((0..self.n_classes).map(|k| if k == class { 1.0 } else { 0.0 }));
        for l in &self.layers {
            let mut y = vec![0.0; l.fan_out()];
            l.apply(&x, &mut y);
            x = y.into_iter().map(|v| math::leaky_relu(v, LEAKY_SLOPE)).collect();
        }
        Ok(x)
    }
}

impl Module for MappingNetwork {
    fn params(&self) -> Vec<&Tensor> {
        linear_params(&self.layers)
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        linear_params_mut(&mut self.layers)
    }
    fn param_names(&self) -> Vec<String> {
        layer_names("mapping", self.layers.len())
    }
}

/// Convolutional tri-plane decoder: a dense stem to `P/8 x P/8`, then three
/// stride-2 transposed convolutions up to `3 * C` channels at `P x P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisNetwork {
    pub stem: Linear,
    pub ups: Vec<ConvTranspose2d>,
    pub channels: usize,
    pub res: usize,
    stem_channels: usize,
}

impl SynthesisNetwork {
    pub fn new(rng: &mut impl Rng, cfg: &SceneConfig) -> Self {
        let s0 = cfg.plane_res / 8;
        let ch = cfg.synth_channels;
        let stem = Linear::new(rng, cfg.w_dim, ch * s0 * s0, RELU_GAIN);
        let ups = vec![
            ConvTranspose2d::new(rng, ch, ch, 4, 2, 1, RELU_GAIN),
            ConvTranspose2d::new(rng, ch, ch, 4, 2, 1, RELU_GAIN),
            ConvTranspose2d::new(rng, ch, 3 * cfg.plane_channels, 4, 2, 1, 1.0),
        ];
        Self { stem, ups, channels: cfg.plane_channels, res: cfg.plane_res, stem_channels: ch }
    }

    /// `w: [B, w_dim]` to planes `[B, 3, C, P, P]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], w: Var) -> Result<Var> {
        let b = tape.shape(w)[0];
        let s0 = self.res / 8;
        let h = Linear::forward(tape, &vars[0..2], w)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let mut h = tape.reshape(h, &[b, self.stem_channels, s0, s0])?;
        for (i, up) in self.ups.iter().enumerate() {
            h = up.forward(tape, &vars[2 + 2 * i..4 + 2 * i], h)?;
            if i + 1 < self.ups.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        tape.reshape(h, &[b, 3, self.channels, self.res, self.res])
    }

    /// Plain synthesis of a single scene.
    pub fn synthesize(&self, w: &[f64]) -> Result<TriPlane> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let wv = tape.constant(Tensor::new(&[1, w.len()], w.to_vec())?);
        let planes = self.forward(&mut tape, &vars, wv)?;
        TriPlane::new(self.channels, self.res, tape.data(planes).to_vec())
    }
}

impl Module for SynthesisNetwork {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.stem.weight, &self.stem.bias];
        p.extend(self.ups.iter().flat_map(|u| [&u.weight, &u.bias]));
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.stem.weight, &mut self.stem.bias];
        p.extend(self.ups.iter_mut().flat_map(|u| [&mut u.weight, &mut u.bias]));
        p
    }
    fn param_names(&self) -> Vec<String> {
        let mut n = vec![String::from("synthesis.stem.weight"), String::from("synthesis.stem.bias")];
        n.extend(layer_names("synthesis.up", self.ups.len()));
        n
    }
}

/// Decoder output for one feature vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub rgb: [f64; 3],
    pub sigma: f64,
}

/// Feature `[C]` to hidden (leaky ReLU) to 4 raw outputs; RGB through a
/// sigmoid, density through a softplus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDecoder {
    pub hidden: Linear,
    pub out: Linear,
}

impl SceneDecoder {
    pub fn new(rng: &mut impl Rng, cfg: &SceneConfig) -> Self {
        Self {
            hidden: Linear::new(rng, cfg.plane_channels, cfg.decoder_hidden, RELU_GAIN),
            out: Linear::new(rng, cfg.decoder_hidden, 4, 1.0),
        }
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear { weight: Tensor::zeros(&[channels, hidden]), bias: Tensor::zeros(&[hidden]) },
            out: Linear { weight: Tensor::zeros(&[hidden, 4]), bias: Tensor::zeros(&[4]) },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.fan_in()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.fan_out()
    }

    pub fn decode(&self, feature: &[f64]) -> Decoded {
        let mut scratch = vec![0.0; self.hidden_dim()];
        let raw = decoder_raw(self.weights(), feature, &mut scratch);
        activate(raw)
    }

    pub(crate) fn weights(&self) -> DecoderWeights<'_> {
        DecoderWeights {
            w1: self.hidden.weight.data(),
            b1: self.hidden.bias.data(),
            w2: self.out.weight.data(),
            b2: self.out.bias.data(),
        }
    }

    /// `feat: [N, C]` to `(rgb [N, 3], sigma [N, 1])`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], feat: Var) -> Result<(Var, Var)> {
        if tape.shape(feat).len() != 2 || tape.shape(feat)[1] != self.in_dim() {
            return Err(shape_err("SceneDecoder::forward", format!("{:?}", tape.shape(feat))));
        }
        let h = Linear::forward(tape, &vars[0..2], feat)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let raw = Linear::forward(tape, &vars[2..4], h)?;
        let rgb = tape.slice(raw, 1, 0, 3)?;
        let rgb = tape.sigmoid(rgb);
        let s = tape.slice(raw, 1, 3, 1)?;
        Ok((rgb, tape.softplus(s)))
    }
}

impl Module for SceneDecoder {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.hidden.weight, &self.hidden.bias, &self.out.weight, &self.out.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.hidden.weight, &mut self.hidden.bias, &mut self.out.weight, &mut self.out.bias]
    }
    fn param_names(&self) -> Vec<String> {
        vec![
            String::from("decoder.hidden.weight"),
            String::from("decoder.hidden.bias"),
            String::from("decoder.out.weight"),
            String::from("decoder.out.bias"),
        ]
    }
}

/// Borrowed decoder weights for the fused render kernel.
#[derive(Clone, Copy)]
pub(crate) struct DecoderWeights<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
}

/// Raw 4-vector; `pre` receives the hidden pre-activations.
#[inline]
pub(crate) fn decoder_raw(w: DecoderWeights<'_>, feat: &[f64], pre: &mut [f64]) -> [f64; 4] {
    let hdim = w.b1.len();
    pre.copy_from_slice(w.b1);
    for (c, &f) in feat.iter().enumerate() {
        if f != 0.0 {
            for (p, wv) in pre.iter_mut().zip(&w.w1[c * hdim..(c + 1) * hdim]) {
                *p += f * wv;
            }
        }
    }
    let mut raw = [w.b2[0], w.b2[1], w.b2[2], w.b2[3]];
    for (j, &p) in pre.iter().enumerate() {
        let a = math::leaky_relu(p, LEAKY_SLOPE);
        for (o, r) in raw.iter_mut().enumerate() {
            *r += a * w.w2[j * 4 + o];
        }
    }
    raw
}

#[inline]
pub(crate) fn activate(raw: [f64; 4]) -> Decoded {
    Decoded {
        rgb: [math::sigmoid(raw[0]), math::sigmoid(raw[1]), math::sigmoid(raw[2])],
        sigma: math::softplus(raw[3]),
    }
}

/// Gradient buffers for [`decoder_backward`]; any may be absent.
pub(crate) struct DecoderGrads<'a> {
    pub w1: Option<&'a mut [f64]>,
    pub b1: Option<&'a mut [f64]>,
    pub w2: Option<&'a mut [f64]>,
    pub b2: Option<&'a mut [f64]>,
}

/// Backpropagates `graw` (gradient w.r.t. the raw 4-vector) through the
/// decoder, writing the feature gradient into `gfeat`.
#[inline]
pub(crate) fn decoder_backward(
    w: DecoderWeights<'_>,
    feat: &[f64],
    pre: &[f64],
    graw: [f64; 4],
    grads: &mut DecoderGrads<'_>,
    gpre: &mut [f64],
    gfeat: &mut [f64],
) {
    let hdim = pre.len();
    if let Some(gb2) = grads.b2.as_deref_mut() {
        for o in 0..4 {
            gb2[o] += graw[o];
        }
    }
    for (j, &p) in pre.iter().enumerate() {
        let row = &w.w2[j * 4..j * 4 + 4];
        let ga = graw[0] * row[0] + graw[1] * row[1] + graw[2] * row[2] + graw[3] * row[3];
        let slope = if p > 0.0 { 1.0 } else { LEAKY_SLOPE };
        gpre[j] = ga * slope;
        if let Some(gw2) = grads.w2.as_deref_mut() {
            let a = p * slope;
            for o in 0..4 {
                gw2[j * 4 + o] += a * graw[o];
            }
        }
    }
    if let Some(gb1) = grads.b1.as_deref_mut() {
        for (d, s) in gb1.iter_mut().zip(gpre.iter()) {
            *d += s;
        }
    }
    for (c, &f) in feat.iter().enumerate() {
        let wrow = &w.w1[c * hdim..(c + 1) * hdim];
        gfeat[c] = wrow.iter().zip(gpre.iter()).map(|(a, b)| a * b).sum();
        if let Some(gw1) = grads.w1.as_deref_mut() {
            if f != 0.0 {
                for (d, s) in gw1[c * hdim..(c + 1) * hdim].iter_mut().zip(gpre.iter()) {
                    *d += f * s;
                }
            }
        }
    }
}
