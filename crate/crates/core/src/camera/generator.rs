use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CameraParams, CameraPrior, N_PARAMS};
use crate::diffmath::{AdamConfig, AdamState, Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{layer_names, linear_params, linear_params_mut, one_hot, Linear, Module};
use crate::tensor::Tensor;

/// Upper bound on a single camera penalty term.
pub const PENALTY_CAP: f64 = 1e6;

/// Output of a camera map on a batch.
#[derive(Debug, Clone, Copy)]
pub struct CameraOutput {
    /// `[B, 6]`.
    pub phi: Var,
    /// `[B, 6]` diagonal derivatives `d phi_i / d phi'_i`, when requested.
    pub diag: Option<Var>,
}

/// A learnable map from prior samples to posterior camera parameters.
pub trait CameraMap: Module {
    /// `z: [B, z_dim]`; `classes.len() == phi_prime.len() == B`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        prior: &CameraPrior,
        phi_prime: &[CameraParams],
        z: Var,
        classes: &[usize],
        with_diag: bool,
    ) -> Result<CameraOutput>;

    /// Plain batched evaluation.
    fn generate(&self, prior: &CameraPrior, phi_prime: &[CameraParams], z: &Tensor, classes: &[usize]) -> Result<Vec<CameraParams>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &vars, prior, phi_prime, zv, classes, false)?;
        super::params_from_tensor(tape.value(out.phi))
    }
}

/// MLP with softplus between layers; supports forward-mode tangents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftplusMlp {
    pub layers: Vec<Linear>,
}

impl SoftplusMlp {
    pub fn new(rng: &mut impl Rng, dims: &[usize], last_gain: f64) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Linear::new(rng, dims[i], dims[i + 1], if i + 1 == n { last_gain } else { 1.0 }))
            .collect();
        Self { layers }
    }

    pub fn num_vars(&self) -> usize {
        2 * self.layers.len()
    }

    /// Returns the output and, for every input tangent `[B, in]`, the
    /// output tangent `[B, out]`.
    pub fn forward_tangents(&self, tape: &mut Tape, vars: &[Var], x: Var, tangents: &[Var]) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut ts = tangents.to_vec();
        let n = self.layers.len();
        for i in 0..n {
            let (w, b) = (vars[2 * i], vars[2 * i + 1]);
            let pre = tape.linear(h, w, b)?;
            for t in ts.iter_mut() {
                *t = tape.matmul(*t, w)?;
            }
            if i + 1 < n {
                h = tape.softplus(pre);
                if !ts.is_empty() {
                    let slope = tape.sigmoid(pre);
                    for t in ts.iter_mut() {
                        *t = tape.mul(slope, *t)?;
                    }
                }
            } else {
                h = pre;
            }
        }
        Ok((h, ts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraGenConfig {
    pub hidden: usize,
    /// Linear layers per head.
    pub layers: usize,
}

impl Default for CameraGenConfig {
    fn default() -> Self {
        Self { hidden: 32, layers: 3 }
    }
}

/// Which latent a head is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Cond {
    Class,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Head {
    first: usize,
    count: usize,
    cond: Cond,
    mlp: SoftplusMlp,
}

/// Three heads: position (class-conditioned), field of view and look-at
/// (latent-conditioned). Each squashes into its prior range by a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraGenerator {
    heads: Vec<Head>,
    z_dim: usize,
    n_classes: usize,
}

impl CameraGenerator {
    pub fn new(rng: &mut impl Rng, cfg: &CameraGenConfig, z_dim: usize, n_classes: usize) -> Self {
        let spec = [(0, 2, Cond::Class), (2, 1, Cond::Latent), (3, 3, Cond::Latent)];
        let heads = spec
            .iter()
            .map(|&(first, count, cond)| {
                let cin = count + if cond == Cond::Class { n_classes } else { z_dim };
                let mut dims = vec![cin];
                dims.extend(core::iter::repeat_n(cfg.hidden, cfg.layers.max(1) - 1));
                dims.push(count);
                Head { first, count, cond, mlp: SoftplusMlp::new(rng, &dims, 1.0) }
            })
            .collect();
        Self { heads, z_dim, n_classes }
    }

    /// Fits the generator to the identity map on prior samples by regression
    /// in normalized coordinates, so training starts from an uncollapsed
    /// camera distribution.
    pub fn fit_identity(&mut self, prior: &CameraPrior, rng: &mut impl Rng, steps: usize, batch: usize) -> Result<f64> {
        let mut adam = AdamState::new(AdamConfig { lr: 1e-2, beta1: 0.9, ..AdamConfig::default() }, &self.params());
        let mut last = f64::NAN;
        for _ in 0..steps {
            let pp = prior.sample_batch(rng, batch);
            let classes: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.n_classes)).collect();
            let z: Vec<f64> = (0..batch * self.z_dim).map(|_| crate::math::std_normal(rng)).collect();
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, true);
            let zv = tape.constant(Tensor::new(&[batch, self.z_dim], z)?);
            let out = self.forward(&mut tape, &vars, prior, &pp, zv, &classes, false)?;
            let target: Vec<f64> = pp.iter().flat_map(|p| prior.normalize(p)).collect();
            // compare in normalized units
            let (mins, maxs) = (prior.mins(), prior.maxs());
            let inv: Vec<f64> = (0..batch).flat_map(|_| (0..N_PARAMS).map(|i| 2.0 / (maxs[i] - mins[i]))).collect();
            let off: Vec<f64> = (0..batch).flat_map(|_| (0..N_PARAMS).map(|i| -2.0 * mins[i] / (maxs[i] - mins[i]) - 1.0)).collect();
            let invv = tape.constant(Tensor::new(&[batch, N_PARAMS], inv)?);
            let offv = tape.constant(Tensor::new(&[batch, N_PARAMS], off)?);
            let tv = tape.constant(Tensor::new(&[batch, N_PARAMS], target)?);
            let scaled = tape.mul(out.phi, invv)?;
            let normed = tape.add(scaled, offv)?;
            let diff = tape.sub(normed, tv)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            last = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let g = tape.grad_tensors(&grads, &vars);
            adam.step(&mut self.params_mut(), &g)?;
        }
        Ok(last)
    }
}

impl Module for CameraGenerator {
    fn params(&self) -> Vec<&Tensor> {
        self.heads.iter().flat_map(|h| linear_params(&h.mlp.layers)).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.heads.iter_mut().flat_map(|h| linear_params_mut(&mut h.mlp.layers)).collect()
    }
    fn param_names(&self) -> Vec<String> {
        ["camera.pos", "camera.fov", "camera.lookat"]
            .iter()
            .zip(&self.heads)
            .flat_map(|(p, h)| layer_names(p, h.mlp.layers.len()))
            .collect()
    }
}

/// Constant `[B, count]` tensor repeating `row`.
fn tiled(tape: &mut Tape, row: &[f64], b: usize) -> Result<Var> {
    let data = (0..b).flat_map(|_| row.iter().copied()).collect();
    Ok(tape.constant(Tensor::new(&[b, row.len()], data)?))
}

/// Squashes raw head outputs into `[m, M]` and propagates tangents.
pub(crate) fn squash(tape: &mut Tape, raw: Var, raw_tangents: &[Var], mins: &[f64], ranges: &[f64]) -> Result<(Var, Vec<Var>)> {
    let b = tape.shape(raw)[0];
    let s = tape.sigmoid(raw);
    let rv = tiled(tape, ranges, b)?;
    let mv = tiled(tape, mins, b)?;
    let scaled = tape.mul(s, rv)?;
    let phi = tape.add(scaled, mv)?;
    let mut outs = Vec::with_capacity(raw_tangents.len());
    if !raw_tangents.is_empty() {
        let ns = tape.neg(s);
        let one_minus = tape.add_scalar(ns, 1.0);
        let ds = tape.mul(s, one_minus)?;
        let slope = tape.mul(ds, rv)?;
        for &t in raw_tangents {
            outs.push(tape.mul(slope, t)?);
        }
    }
    Ok((phi, outs))
}

/// Diagonal of a family of tangents: column `i` of `tangents[i]`, stacked to `[B, n]`.
pub(crate) fn diagonal(tape: &mut Tape, tangents: &[Var]) -> Result<Var> {
    let n = tangents.len();
    let mut cols = Vec::with_capacity(n);
    for (i, &t) in tangents.iter().enumerate() {
        let b = tape.shape(t)[0];
        let idx: Vec<usize> = (0..b).map(|r| r * n + i).collect();
        let c = tape.gather(t, &idx)?;
        cols.push(tape.reshape(c, &[b, 1])?);
    }
    tape.concat(1, &cols)
}

/// Normalized prior samples `[B, 6]` in `[-1, 1]` and the per-parameter
/// derivative of the normalization.
pub(crate) fn normalized_input(prior: &CameraPrior, phi_prime: &[CameraParams]) -> (Tensor, [f64; N_PARAMS]) {
    let data: Vec<f64> = phi_prime.iter().flat_map(|p| prior.normalize(p)).collect();
    let ranges = prior.params().map(|p| 2.0 / p.range());
    (Tensor::new(&[phi_prime.len(), N_PARAMS], data).expect("camera batch"), ranges)
}

impl CameraMap for CameraGenerator {
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        prior: &CameraPrior,
        phi_prime: &[CameraParams],
        z: Var,
        classes: &[usize],
        with_diag: bool,
    ) -> Result<CameraOutput> {
        let b = phi_prime.len();
        if classes.len() != b || tape.shape(z) != [b, self.z_dim] {
            return Err(shape_err("CameraGenerator::forward", format!("batch {b}, z {:?}", tape.shape(z))));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.n_classes) {
            return Err(invalid(format!("class {c} out of range")));
        }
        if phi_prime.iter().any(|p| p.0.iter().any(|v| !v.is_finite())) || tape.data(z).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: String::from("camera generator input"), value: f64::NAN });
        }
        let (xin, dnorm) = normalized_input(prior, phi_prime);
        let xin = tape.constant(xin);
        let oh = one_hot(tape, classes, self.n_classes);
        let (mins, maxs) = (prior.mins(), prior.maxs());
        let mut phis = Vec::new();
        let mut diags = Vec::new();
        let mut offset = 0;
        for h in &self.heads {
            let hv = &vars[offset..offset + h.mlp.num_vars()];
            offset += h.mlp.num_vars();
            let part = tape.slice(xin, 1, h.first, h.count)?;
            let cond = match h.cond {
                Cond::Class => oh,
                Cond::Latent => z,
            };
            let x = tape.concat(1, &[part, cond])?;
            let width = tape.shape(x)[1];
            let mut tangents = Vec::new();
            if with_diag {
                for j in 0..h.count {
                    let mut row = vec![0.0; width];
                    row[j] = dnorm[h.first + j];
                    tangents.push(tiled(tape, &row, b)?);
                }
            }
            let (raw, raw_t) = h.mlp.forward_tangents(tape, hv, x, &tangents)?;
            let range = &mins[h.first..h.first + h.count];
            let ranges: Vec<f64> = (h.first..h.first + h.count).map(|i| maxs[i] - mins[i]).collect();
            let (phi, ts) = squash(tape, raw, &raw_t, range, &ranges)?;
            phis.push(phi);
            if with_diag {
                diags.push(diagonal(tape, &ts)?);
            }
        }
        let phi = tape.concat(1, &phis)?;
        let diag = if with_diag { Some(tape.concat(1, &diags)?) } else { None };
        Ok(CameraOutput { phi, diag })
    }
}

/// Per-parameter camera gradient penalties.
#[derive(Debug, Clone, Copy)]
pub struct GradPenalty {
    /// `[6]`: batch mean of `|g| + 1/|g|` for each parameter.
    pub per_param: Var,
    /// Set when any derivative magnitude hit the floor (a collapsed head).
    pub collapsed: bool,
}

/// `|g| + |g|^-1` on the diagonal derivatives `diag: [B, 6]`, averaged over
/// the batch. Magnitudes are clamped to `[1/cap, cap]` so a vanishing
/// derivative yields a finite value near `cap`.
pub fn camera_gradient_penalty(tape: &mut Tape, diag: Var) -> Result<GradPenalty> {
    let shape = tape.shape(diag).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(shape_err("camera_gradient_penalty", format!("{shape:?}")));
    }
    let (b, n) = (shape[0], shape[1]);
    let lo = 1.0 / PENALTY_CAP;
    let collapsed = tape.data(diag).iter().any(|g| !(g.abs() > lo));
    let a = tape.abs(diag);
    let g = tape.clamp(a, lo, PENALTY_CAP);
    let inv = tape.recip(g);
    let l = tape.add(g, inv)?;
    let l = tape.clamp(l, 0.0, PENALTY_CAP);
    // batch mean per column
    let ones = tape.constant(Tensor::full(&[1, b], 1.0 / b as f64));
    let per = tape.matmul(ones, l)?;
    let per_param = tape.reshape(per, &[n])?;
    Ok(GradPenalty { per_param, collapsed })
}
