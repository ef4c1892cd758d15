//! Ball-in-Sphere camera: parameters, prior, view frames, the camera
//! generator and its regularizers.

mod emd;
mod generator;

pub use emd::{emd_entropy_reg, emd_to_uniform, emd_to_uniform_tape};
pub use generator::{
    camera_gradient_penalty, CameraGenConfig, CameraGenerator, CameraMap, CameraOutput, GradPenalty, SoftplusMlp,
    PENALTY_CAP,
};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const N_PARAMS: usize = 6;
pub const YAW: usize = 0;
pub const PITCH: usize = 1;
pub const FOV: usize = 2;
pub const LOOKAT_YAW: usize = 3;
pub const LOOKAT_PITCH: usize = 4;
pub const LOOKAT_RADIUS: usize = 5;
pub const PARAM_NAMES: [&str; N_PARAMS] = ["yaw", "pitch", "fov", "lookat_yaw", "lookat_pitch", "lookat_radius"];

/// Polar angles are kept this far from the poles so the world-up frame exists.
pub const POLE_MARGIN: f64 = 1e-3;

/// `[yaw, pitch, fov, lookat_yaw, lookat_pitch, lookat_radius]`.
///
/// Pitch is the polar angle from world +z, so a point at (yaw, pitch) on a
/// sphere of radius `R` is `R (sin p cos y, sin p sin y, cos p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams(pub [f64; N_PARAMS]);

impl CameraParams {
    pub fn yaw(&self) -> f64 {
        self.0[YAW]
    }
    pub fn pitch(&self) -> f64 {
        self.0[PITCH]
    }
    pub fn fov(&self) -> f64 {
        self.0[FOV]
    }
    pub fn lookat(&self) -> [f64; 3] {
        [self.0[LOOKAT_YAW], self.0[LOOKAT_PITCH], self.0[LOOKAT_RADIUS]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFamily {
    Uniform,
    /// Gaussian draws clamped into the range.
    TruncatedGaussian { mean: f64, std: f64 },
}

/// Serialized flat as `min, max, family` plus `mean, std` for the Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlatPrior", into = "FlatPrior")]
pub struct ParamPrior {
    pub min: f64,
    pub max: f64,
    pub family: PriorFamily,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatPrior {
    min: f64,
    max: f64,
    family: FamilyTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FamilyTag {
    Uniform,
    TruncatedGaussian,
}

impl TryFrom<FlatPrior> for ParamPrior {
    type Error = String;

    fn try_from(f: FlatPrior) -> core::result::Result<Self, String> {
        let family = match (f.family, f.mean, f.std) {
            (FamilyTag::Uniform, None, None) => PriorFamily::Uniform,
            (FamilyTag::Uniform, _, _) => return Err(String::from("a uniform prior takes no mean or std")),
            (FamilyTag::TruncatedGaussian, Some(mean), Some(std)) => PriorFamily::TruncatedGaussian { mean, std },
            (FamilyTag::TruncatedGaussian, _, _) => return Err(String::from("a truncated Gaussian prior needs mean and std")),
        };
        Ok(Self { min: f.min, max: f.max, family })
    }
}

impl From<ParamPrior> for FlatPrior {
    fn from(p: ParamPrior) -> Self {
        let (family, mean, std) = match p.family {
            PriorFamily::Uniform => (FamilyTag::Uniform, None, None),
            PriorFamily::TruncatedGaussian { mean, std } => (FamilyTag::TruncatedGaussian, Some(mean), Some(std)),
        };
        Self { min: p.min, max: p.max, family, mean, std }
    }
}

impl ParamPrior {
    pub const fn uniform(min: f64, max: f64) -> Self {
        Self { min, max, family: PriorFamily::Uniform }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self.family {
            PriorFamily::Uniform => self.min + self.range() * rng.random::<f64>(),
            PriorFamily::TruncatedGaussian { mean, std } => {
                let n = Normal::new(mean, std).expect("validated std");
                n.sample(rng).clamp(self.min, self.max)
            }
        }
    }

    /// Mean of the (untruncated) family.
    pub fn center(&self) -> f64 {
        match self.family {
            PriorFamily::Uniform => 0.5 * (self.min + self.max),
            PriorFamily::TruncatedGaussian { mean, .. } => mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraPrior {
    pub outer_radius: f64,
    pub yaw: ParamPrior,
    pub pitch: ParamPrior,
    pub fov: ParamPrior,
    pub lookat_yaw: ParamPrior,
    pub lookat_pitch: ParamPrior,
    pub lookat_radius: ParamPrior,
}

impl Default for CameraPrior {
    fn default() -> Self {
        Self {
            outer_radius: 1.0,
            yaw: ParamPrior::uniform(-PI, PI),
            pitch: ParamPrior::uniform(FRAC_PI_2 - 0.8, FRAC_PI_2 + 0.8),
            fov: ParamPrior::uniform(0.2, 1.2),
            lookat_yaw: ParamPrior::uniform(-PI, PI),
            lookat_pitch: ParamPrior::uniform(POLE_MARGIN, PI - POLE_MARGIN),
            lookat_radius: ParamPrior::uniform(0.0, 0.3),
        }
    }
}

impl CameraPrior {
    pub fn params(&self) -> [&ParamPrior; N_PARAMS] {
        [&self.yaw, &self.pitch, &self.fov, &self.lookat_yaw, &self.lookat_pitch, &self.lookat_radius]
    }

    pub fn validate(&self) -> Result<()> {
        for (p, name) in self.params().iter().zip(PARAM_NAMES) {
            if !(p.min.is_finite() && p.max.is_finite() && p.min < p.max) {
                return Err(invalid(format!("camera prior {name}: need finite min < max")));
            }
            if let PriorFamily::TruncatedGaussian { mean, std } = p.family {
                if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(invalid(format!("camera prior {name}: bad gaussian")));
                }
            }
        }
        if !(self.outer_radius > 0.0) {
            return Err(invalid("outer radius must be positive"));
        }
        if self.lookat_radius.min < 0.0 || self.lookat_radius.max >= self.outer_radius {
            return Err(invalid("look-at radius range must lie in [0, outer radius)"));
        }
        if self.fov.min <= 0.0 || self.fov.max >= PI {
            return Err(invalid("field of view must lie in (0, pi)"));
        }
        Ok(())
    }

    pub fn mins(&self) -> [f64; N_PARAMS] {
        self.params().map(|p| p.min)
    }

    pub fn maxs(&self) -> [f64; N_PARAMS] {
        self.params().map(|p| p.max)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> CameraParams {
        let ps = self.params();
        let mut phi = [0.0; N_PARAMS];
        for (v, p) in phi.iter_mut().zip(ps) {
            *v = p.sample(rng);
        }
        CameraParams(phi)
    }

    pub fn sample_batch(&self, rng: &mut impl Rng, n: usize) -> Vec<CameraParams> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Prior-mean position and field of view, looking at the world center.
    pub fn frontal(&self) -> CameraParams {
        CameraParams([self.yaw.center(), self.pitch.center(), self.fov.center(), 0.0, FRAC_PI_2, 0.0])
    }

    /// Maps each component affinely from `[m, M]` onto `[-1, 1]`.
    pub fn normalize(&self, phi: &CameraParams) -> [f64; N_PARAMS] {
        let ps = self.params();
        let mut out = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            out[i] = 2.0 * (phi.0[i] - ps[i].min) / ps[i].range() - 1.0;
        }
        out
    }
}

/// Camera origin, orthonormal basis and look-at point.
///
/// `right x up = -forward` (camera looks down its local `-z`), so
/// `det[right, up, -forward] = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub origin: [f64; 3],
    pub right: [f64; 3],
    pub up: [f64; 3],
    pub forward: [f64; 3],
    pub lookat: [f64; 3],
}

pub fn spherical(radius: f64, yaw: f64, pitch: f64) -> [f64; 3] {
    let sp = math::sin(pitch);
    [radius * sp * math::cos(yaw), radius * sp * math::sin(yaw), radius * math::cos(pitch)]
}

const DEGENERATE_EPS: f64 = 1e-9;

fn norm3(v: [f64; 3]) -> f64 {
    math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn build_view(phi: &CameraParams, outer_radius: f64) -> Result<View> {
    let pitch = phi.pitch().clamp(POLE_MARGIN, PI - POLE_MARGIN);
    let origin = spherical(outer_radius, phi.yaw(), pitch);
    let [ly, lp, lr] = phi.lookat();
    let lookat = spherical(lr, ly, lp);
    let f = [lookat[0] - origin[0], lookat[1] - origin[1], lookat[2] - origin[2]];
    let fl = norm3(f);
    if !(fl > DEGENERATE_EPS) {
        return Err(Error::DegenerateView("camera origin coincides with the look-at point"));
    }
    let forward = f.map(|v| v / fl);
    let r = cross(forward, [0.0, 0.0, 1.0]);
    let rl = norm3(r);
    if !(rl > DEGENERATE_EPS) {
        return Err(Error::DegenerateView("forward axis is parallel to world up"));
    }
    let right = r.map(|v| v / rl);
    let up = cross(right, forward);
    Ok(View { origin, right, up, forward, lookat })
}

/// View frames for a batch `phi: [B, 6]` on the tape; each output is `[B, 3]`.
#[derive(Debug, Clone, Copy)]
pub struct ViewVars {
    pub origin: Var,
    pub right: Var,
    pub up: Var,
    pub forward: Var,
}

fn column(tape: &mut Tape, x: Var, i: usize, width: usize) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let idx: Vec<usize> = (0..rows).map(|r| r * width + i).collect();
    tape.gather(x, &idx)
}

fn stack3(tape: &mut Tape, c: [Var; 3]) -> Result<Var> {
    let n = tape.shape(c[0])[0];
    let cols = [tape.reshape(c[0], &[n, 1])?, tape.reshape(c[1], &[n, 1])?, tape.reshape(c[2], &[n, 1])?];
    tape.concat(1, &cols)
}

fn spherical_tape(tape: &mut Tape, r: Option<Var>, radius: f64, yaw: Var, pitch: Var) -> Result<[Var; 3]> {
    let sp = tape.sin(pitch);
    let cp = tape.cos(pitch);
    let cy = tape.cos(yaw);
    let sy = tape.sin(yaw);
    let mut x = tape.mul(sp, cy)?;
    let mut y = tape.mul(sp, sy)?;
    let mut z = cp;
    match r {
        Some(r) => {
            x = tape.mul(x, r)?;
            y = tape.mul(y, r)?;
            z = tape.mul(z, r)?;
        }
        None => {
            x = tape.scale(x, radius);
            y = tape.scale(y, radius);
            z = tape.scale(z, radius);
        }
    }
    Ok([x, y, z])
}

fn normalize3(tape: &mut Tape, v: [Var; 3]) -> Result<([Var; 3], Var)> {
    let sq = [tape.square(v[0]), tape.square(v[1]), tape.square(v[2])];
    let s01 = tape.add(sq[0], sq[1])?;
    let s = tape.add(s01, sq[2])?;
    let n = tape.sqrt(s);
    let inv = tape.recip(n);
    Ok(([tape.mul(v[0], inv)?, tape.mul(v[1], inv)?, tape.mul(v[2], inv)?], n))
}

/// Differentiable counterpart of [`build_view`].
pub fn build_view_tape(tape: &mut Tape, phi: Var, outer_radius: f64) -> Result<ViewVars> {
    if tape.shape(phi).len() != 2 || tape.shape(phi)[1] != N_PARAMS {
        return Err(shape_err("build_view_tape", format!("{:?}", tape.shape(phi))));
    }
    let c: Vec<Var> = (0..N_PARAMS).map(|i| column(tape, phi, i, N_PARAMS)).collect::<Result<_>>()?;
    let pitch = tape.clamp(c[PITCH], POLE_MARGIN, PI - POLE_MARGIN);
    let o = spherical_tape(tape, None, outer_radius, c[YAW], pitch)?;
    let l = spherical_tape(tape, Some(c[LOOKAT_RADIUS]), 0.0, c[LOOKAT_YAW], c[LOOKAT_PITCH])?;
    let f = [tape.sub(l[0], o[0])?, tape.sub(l[1], o[1])?, tape.sub(l[2], o[2])?];
    let (fwd, fl) = normalize3(tape, f)?;
    if tape.data(fl).iter().any(|&v| !(v > DEGENERATE_EPS)) {
        return Err(Error::DegenerateView("camera origin coincides with the look-at point"));
    }
    // right = fwd x z = (fy, -fx, 0)
    let nfx = tape.neg(fwd[0]);
    let zero = tape.scale(fwd[2], 0.0);
    let (right, rl) = normalize3(tape, [fwd[1], nfx, zero])?;
    if tape.data(rl).iter().any(|&v| !(v > DEGENERATE_EPS)) {
        return Err(Error::DegenerateView("forward axis is parallel to world up"));
    }
    // up = right x fwd with right_z = 0
    let a = tape.mul(right[1], fwd[2])?;
    let b = tape.mul(right[0], fwd[2])?;
    let ux = a;
    let uy = tape.neg(b);
    let p = tape.mul(right[0], fwd[1])?;
    let q = tape.mul(right[1], fwd[0])?;
    let uz = tape.sub(p, q)?;
    Ok(ViewVars {
        origin: stack3(tape, o)?,
        right: stack3(tape, right)?,
        up: stack3(tape, [ux, uy, uz])?,
        forward: stack3(tape, fwd)?,
    })
}

/// `[B, 6]` constant tensor of camera parameters.
pub fn params_tensor(phis: &[CameraParams]) -> Tensor {
    let data = phis.iter().flat_map(|p| p.0).collect();
    Tensor::new(&[phis.len(), N_PARAMS], data).expect("camera batch shape")
}

pub fn params_from_tensor(t: &Tensor) -> Result<Vec<CameraParams>> {
    if t.shape().len() != 2 || t.shape()[1] != N_PARAMS {
        return Err(shape_err("params_from_tensor", format!("{:?}", t.shape())));
    }
    Ok(t.data().chunks(N_PARAMS).map(|c| CameraParams([c[0], c[1], c[2], c[3], c[4], c[5]])).collect())
}

#[cfg(test)]
mod tests;
