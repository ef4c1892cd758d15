//! Central finite-difference validation of tape gradients.

use alloc::vec::Vec;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Analytic and numeric gradients of a scalar function, coordinate by coordinate.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl FiniteDiffReport {
    /// `max_i |a_i - n_i| / (|n_i| + 1e-8)`.
    pub fn max_rel_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
            .fold(0.0, f64::max)
    }

    /// `max_i |a_i - n_i| / max(max_i |n_i|, 1e-8)`; insensitive to entries
    /// whose true value is near zero.
    pub fn max_norm_rel_error(&self) -> f64 {
        let scale = self.numeric.iter().fold(0.0f64, |m, n| m.max(n.abs())).max(1e-8);
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
            / scale
    }
}

/// Evaluates `f` at `point` on the tape and compares its reverse-mode gradient
/// against central differences with step `step`.
pub fn finite_diff_report<F>(f: F, point: &[f64], step: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(point.to_vec()));
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = match grads.wrt(x) {
        Some(g) => g.to_vec(),
        None => alloc::vec![0.0; point.len()],
    };
    let eval = |p: Vec<f64>, coord: usize| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.constant(Tensor::from_vec(p));
        let yv = f(&mut t, xv)?;
        let v = t.value(yv).item();
        if !v.is_finite() {
            return Err(Error::NonFiniteAt(coord));
        }
        Ok(v)
    };
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        let mut minus = point.to_vec();
        plus[i] += step;
        minus[i] -= step;
        let (fp, fm) = (eval(plus, i)?, eval(minus, i)?);
        numeric.push((fp - fm) / (2.0 * step));
    }
    Ok(FiniteDiffReport { analytic, numeric })
}

/// Maximum per-coordinate relative error between analytic and
/// central-difference gradients.
pub fn finite_diff_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(finite_diff_report(f, point, step)?.max_rel_error())
}
