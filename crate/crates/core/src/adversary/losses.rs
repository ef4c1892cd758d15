use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::Discriminator;
use crate::camera::N_PARAMS;
use crate::diffmath::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::nn::Module;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub pos: f64,
    pub fov: f64,
    pub lookat: f64,
    pub dist: f64,
    pub r1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pos: 0.3, fov: 0.03, lookat: 0.003, dist: 1.0, r1: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.pos, self.fov, self.lookat, self.dist, self.r1].iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(invalid("loss weights must be finite and nonnegative"))
        }
    }

    /// Per camera parameter, in parameter order.
    pub fn camera(&self) -> [f64; N_PARAMS] {
        [self.pos, self.pos, self.fov, self.lookat, self.lookat, self.lookat]
    }
}

/// Non-saturating losses `(L_G, L_D)` from score vectors.
pub fn adv_losses(tape: &mut Tape, real: Var, fake: Var) -> Result<(Var, Var)> {
    let nf = tape.neg(fake);
    let g_terms = tape.softplus(nf);
    let g = tape.mean(g_terms);
    let nr = tape.neg(real);
    let r_terms = tape.softplus(nr);
    let r = tape.mean(r_terms);
    let f_terms = tape.softplus(fake);
    let f = tape.mean(f_terms);
    let d = tape.add(r, f)?;
    Ok((g, d))
}

/// Batch mean of `||e - e_hat||^2`; zero for an empty batch.
pub fn distill_loss(tape: &mut Tape, e: Var, e_hat: Var) -> Result<Var> {
    let (se, sh) = (tape.shape(e).to_vec(), tape.shape(e_hat).to_vec());
    if se != sh || se.len() != 2 {
        return Err(shape_err("distill_loss", format!("{se:?} vs {sh:?}")));
    }
    if se[0] == 0 {
        return Ok(tape.scalar(0.0));
    }
    let diff = tape.sub(e, e_hat)?;
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / se[0] as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratorLossParts {
    pub adv: f64,
    /// Camera regularizer per parameter (gradient penalty, or EMD times `emd_scale`).
    pub camera: [f64; N_PARAMS],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiscriminatorLossParts {
    pub adv: f64,
    pub dist: f64,
    pub r1: f64,
}

/// `L_adv + sum_i lambda_i L_i`.
pub fn generator_loss(parts: &GeneratorLossParts, w: &LossWeights) -> f64 {
    let cw = w.camera();
    parts.adv + (0..N_PARAMS).map(|i| cw[i] * parts.camera[i]).sum::<f64>()
}

/// `L_adv + lambda_dist L_dist + lambda_r R1`.
pub fn discriminator_loss(parts: &DiscriminatorLossParts, w: &LossWeights) -> f64 {
    parts.adv + w.dist * parts.dist + w.r1 * parts.r1
}

/// R1 value and its gradient with respect to the discriminator parameters.
#[derive(Debug, Clone)]
pub struct R1 {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// `1/2 * mean_b ||grad_x score_b||^2` for any per-sample critic over a batch
/// `x` with the batch on axis 0, together with the input gradient.
pub fn r1_value<F>(x: &Tensor, critic: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let b = x.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let score = critic(&mut tape, xv)?;
    if tape.shape(score) != [b] {
        return Err(shape_err("r1_value", format!("scores {:?} for batch {b}", tape.shape(score))));
    }
    let total = tape.sum(score);
    let gx = tape.backward(total)?.wrt(xv).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; x.len()]);
    Ok((0.5 * gx.iter().map(|v| v * v).sum::<f64>() / b as f64, gx))
}

/// Relative step of the directional difference used for the parameter
/// gradient.
const R1_STEP: f64 = 1e-4;

/// `1/2 * mean_b ||grad_x D(x_b)||^2` over the real batch `x: [B, 4, h, w]`.
///
/// The parameter gradient `(1/B) sum_b H_{theta x} g_b` is obtained as the
/// parameter gradient of the central difference of `D` along each `g_b`.
pub fn r1_penalty(d: &Discriminator, x: &Tensor, classes: &[usize], psi: &[[f64; 3]]) -> Result<R1> {
    let b = x.shape()[0];
    if b == 0 {
        return Ok(R1 { value: 0.0, grads: d.params().iter().map(|t| Tensor::zeros(t.shape())).collect() });
    }
    let per = x.len() / b;
    let (value, gx) = r1_value(x, |tape, xv| {
        let vars = d.bind(tape, false);
        Ok(d.forward(tape, &vars, xv, classes, psi)?.0)
    })?;
    let norms: Vec<f64> = (0..b).map(|i| gx[i * per..(i + 1) * per].iter().map(|v| v * v).sum::<f64>()).map(libm::sqrt).collect();

    // x_b +- h g_b / |g_b|, stacked as one batch of 2B
    let mut shifted = Vec::with_capacity(2 * x.len());
    for sign in [1.0, -1.0] {
        for i in 0..b {
            let k = if norms[i] > 0.0 { sign * R1_STEP / norms[i] } else { 0.0 };
            shifted.extend((0..per).map(|j| x.data()[i * per + j] + k * gx[i * per + j]));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = 2 * b;
    let mut tape = Tape::new();
    let vars = d.bind(&mut tape, true);
    let xs = tape.constant(Tensor::new(&shape, shifted)?);
    let cls: Vec<usize> = classes.iter().chain(classes).copied().collect();
    let ps: Vec<[f64; 3]> = psi.iter().chain(psi).copied().collect();
    let (score, _) = d.forward(&mut tape, &vars, xs, &cls, &ps)?;
    let coef: Vec<f64> = [1.0, -1.0]
        .iter()
        .flat_map(|s| norms.iter().map(move |n| s * n / (2.0 * R1_STEP * b as f64)))
        .collect();
    let cv = tape.constant(Tensor::from_vec(coef));
    let weighted = tape.mul(score, cv)?;
    let obj = tape.sum(weighted);
    let grads = tape.backward(obj)?;
    Ok(R1 { value, grads: tape.grad_tensors(&grads, &vars) })
}
