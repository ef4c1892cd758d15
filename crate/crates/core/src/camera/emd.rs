use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use super::{CameraPrior, N_PARAMS};
use crate::diffmath::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn quantile(k: usize, n: usize, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (k as f64 + 0.5) / n as f64
}

/// Sort permutation (stable, NaN-free input assumed).
fn order(x: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    idx
}

/// 1-D earth mover's distance between the empirical distribution of
/// `samples` and `U[lo, hi]`, using `n` evenly spaced quantile targets.
pub fn emd_to_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let idx = order(samples);
    idx.iter().enumerate().map(|(k, &i)| (samples[i] - quantile(k, n, lo, hi)).abs()).sum::<f64>() / n as f64
}

/// Differentiable [`emd_to_uniform`] on `samples: [n]`; the gradient routes
/// through the optimal (sorted) assignment.
pub fn emd_to_uniform_tape(tape: &mut Tape, samples: Var, lo: f64, hi: f64) -> Result<Var> {
    let xs = tape.data(samples);
    let n = xs.len();
    if tape.shape(samples).len() != 1 || n == 0 {
        return Err(shape_err("emd_to_uniform_tape", format!("{:?}", tape.shape(samples))));
    }
    let idx = order(xs);
    let signs: Vec<(usize, f64)> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| (i, (xs[i] - quantile(k, n, lo, hi)).signum()))
        .collect();
    let value = emd_to_uniform(xs, lo, hi);
    Ok(tape.custom(
        Tensor::scalar(value),
        &[samples],
        Box::new(move |g, _, sink| {
            if let Some(gx) = sink.slot(samples) {
                for &(i, s) in &signs {
                    gx[i] += g[0] * s / n as f64;
                }
            }
        }),
    ))
}

/// Per-parameter EMD between generated cameras `phi: [n, 6]` and the
/// uniform distribution over each prior range; returns `[6]`.
pub fn emd_entropy_reg(tape: &mut Tape, phi: Var, prior: &CameraPrior) -> Result<Var> {
    let shape = tape.shape(phi).to_vec();
    if shape.len() != 2 || shape[1] != N_PARAMS || shape[0] < 2 {
        return Err(shape_err("emd_entropy_reg", format!("{shape:?}")));
    }
    let n = shape[0];
    let ps = prior.params();
    let mut parts = Vec::with_capacity(N_PARAMS);
    for (i, p) in ps.iter().enumerate() {
        let idx: Vec<usize> = (0..n).map(|r| r * N_PARAMS + i).collect();
        let col = tape.gather(phi, &idx)?;
        let e = emd_to_uniform_tape(tape, col, p.min, p.max)?;
        parts.push(tape.reshape(e, &[1])?);
    }
    tape.concat(0, &parts)
}
