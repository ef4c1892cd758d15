//! Tri-plane storage and bilinear feature lookup.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffmath::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Coordinate pairs `(u, v)` sampled on each plane: xy, yz, xz.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Three axis-aligned feature planes, stored `[3, C, P, P]` with rows along
/// the second coordinate of each plane and columns along the first.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlane {
    channels: usize,
    res: usize,
    data: Vec<f64>,
}

/// Result of a lookup: the averaged feature and whether the point had to be
/// clamped into the scene cube.
#[derive(Debug, Clone, PartialEq)]
pub struct Lookup {
    pub feature: Vec<f64>,
    pub clamped: bool,
}

impl TriPlane {
    pub fn new(channels: usize, res: usize, data: Vec<f64>) -> Result<Self> {
        if res < 2 || channels == 0 {
            return Err(invalid(format!("tri-plane needs res >= 2 and channels >= 1, got {res}, {channels}")));
        }
        if data.len() != 3 * channels * res * res {
            return Err(shape_err("TriPlane::new", format!("{} values for 3x{channels}x{res}x{res}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("tri-plane values must be finite"));
        }
        Ok(Self { channels, res, data })
    }

    pub fn constant(channels: usize, res: usize, value: f64) -> Self {
        Self { channels, res, data: vec![value; 3 * channels * res * res] }
    }

    /// Builds from a `[3, C, P, P]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [3, c, p, q] if p == q => Self::new(*c, *p, t.data().to_vec()),
            s => Err(shape_err("TriPlane::from_tensor", format!("{s:?}"))),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value at plane `k`, channel `c`, row `v`, column `u`.
    pub fn at(&self, k: usize, c: usize, v: usize, u: usize) -> f64 {
        self.data[((k * self.channels + c) * self.res + v) * self.res + u]
    }

    pub fn set(&mut self, k: usize, c: usize, v: usize, u: usize, value: f64) {
        let r = self.res;
        self.data[((k * self.channels + c) * r + v) * r + u] = value;
    }

    /// Mean of the three bilinear plane samples at `xyz` (cube `[-1, 1]^3`).
    pub fn lookup(&self, xyz: [f64; 3]) -> Lookup {
        let mut feature = vec![0.0; self.channels];
        let fp = Footprint::new(xyz, self.res);
        fp.gather(&self.data, self.channels, self.res, &mut feature);
        Lookup { feature, clamped: fp.clamped }
    }
}

/// Per-point bilinear stencil on all three planes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Footprint {
    /// Offset of the lower-left texel inside one `P x P` plane.
    cell: [usize; 3],
    a: [f64; 3],
    b: [f64; 3],
    /// d(texel coordinate)/d(world coordinate) along u and v; zero when clamped.
    du: [f64; 3],
    dv: [f64; 3],
    pub clamped: bool,
}

#[inline]
fn axis(u: f64, res: usize) -> (usize, f64, f64, bool) {
    let clamped = !(-1.0..=1.0).contains(&u);
    let uc = u.clamp(-1.0, 1.0);
    let scale = 0.5 * (res - 1) as f64;
    let f = (uc + 1.0) * scale;
    let i = (f as usize).min(res - 2);
    (i, f - i as f64, if clamped { 0.0 } else { scale }, clamped)
}

impl Footprint {
    #[inline]
    pub(crate) fn new(xyz: [f64; 3], res: usize) -> Self {
        let mut fp = Footprint { cell: [0; 3], a: [0.0; 3], b: [0.0; 3], du: [0.0; 3], dv: [0.0; 3], clamped: false };
        for (k, &(iu, iv)) in PLANE_AXES.iter().enumerate() {
            let (u0, a, du, cu) = axis(xyz[iu], res);
            let (v0, b, dv, cv) = axis(xyz[iv], res);
            fp.cell[k] = v0 * res + u0;
            fp.a[k] = a;
            fp.b[k] = b;
            fp.du[k] = du;
            fp.dv[k] = dv;
            fp.clamped |= cu || cv;
        }
        fp
    }

    /// `out[c] = mean_k bilerp(plane k, channel c)`.
    #[inline]
    pub(crate) fn gather(&self, planes: &[f64], channels: usize, res: usize, out: &mut [f64]) {
        let pp = res * res;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..3 {
            let (a, b) = (self.a[k], self.b[k]);
            let w00 = (1.0 - a) * (1.0 - b) / 3.0;
            let w01 = a * (1.0 - b) / 3.0;
            let w10 = (1.0 - a) * b / 3.0;
            let w11 = a * b / 3.0;
            let base = k * channels * pp + self.cell[k];
            for (c, o) in out.iter_mut().enumerate() {
                let i = base + c * pp;
                *o += w00 * planes[i] + w01 * planes[i + 1] + w10 * planes[i + res] + w11 * planes[i + res + 1];
            }
        }
    }

    /// Adjoint of [`Footprint::gather`]: accumulates plane gradients (when
    /// requested) and returns the gradient with respect to `xyz`.
    #[inline]
    pub(crate) fn scatter(
        &self,
        planes: &[f64],
        grad_planes: Option<&mut [f64]>,
        channels: usize,
        res: usize,
        grad_feature: &[f64],
    ) -> [f64; 3] {
        let pp = res * res;
        let mut gxyz = [0.0; 3];
        for (k, &(iu, iv)) in PLANE_AXES.iter().enumerate() {
            let (a, b) = (self.a[k], self.b[k]);
            let base = k * channels * pp + self.cell[k];
            let (mut gu, mut gv) = (0.0, 0.0);
            for (c, &g) in grad_feature.iter().enumerate() {
                let i = base + c * pp;
                let (t00, t01, t10, t11) = (planes[i], planes[i + 1], planes[i + res], planes[i + res + 1]);
                gu += g * ((1.0 - b) * (t01 - t00) + b * (t11 - t10));
                gv += g * ((1.0 - a) * (t10 - t00) + a * (t11 - t01));
            }
            gxyz[iu] += gu * self.du[k] / 3.0;
            gxyz[iv] += gv * self.dv[k] / 3.0;
        }
        if let Some(gp) = grad_planes {
            for k in 0..3 {
                let (a, b) = (self.a[k], self.b[k]);
                let w00 = (1.0 - a) * (1.0 - b) / 3.0;
                let w01 = a * (1.0 - b) / 3.0;
                let w10 = (1.0 - a) * b / 3.0;
                let w11 = a * b / 3.0;
                let base = k * channels * pp + self.cell[k];
                for (c, &g) in grad_feature.iter().enumerate() {
                    let i = base + c * pp;
                    gp[i] += w00 * g;
                    gp[i + 1] += w01 * g;
                    gp[i + res] += w10 * g;
                    gp[i + res + 1] += w11 * g;
                }
            }
        }
        gxyz
    }
}

/// Differentiable lookup of fixed points into `planes: [3, C, P, P]`,
/// returning features `[N, C]`.
pub fn lookup_tape(tape: &mut Tape, planes: Var, points: &[[f64; 3]]) -> Result<Var> {
    let (channels, res) = match tape.shape(planes) {
        [3, c, p, q] if p == q && *p >= 2 => (*c, *p),
        s => return Err(shape_err("lookup_tape", format!("{s:?}"))),
    };
    let prints: Vec<Footprint> = points.iter().map(|&q| Footprint::new(q, res)).collect();
    let mut out = vec![0.0; points.len() * channels];
    let pv = tape.data(planes);
    for (n, fp) in prints.iter().enumerate() {
        fp.gather(pv, channels, res, &mut out[n * channels..(n + 1) * channels]);
    }
    let t = Tensor::new(&[points.len(), channels], out)?;
    Ok(tape.custom(
        t,
        &[planes],
        Box::new(move |g, vals, sink| {
            let pv = vals.get(planes);
            if let Some(gp) = sink.slot(planes) {
                for (n, fp) in prints.iter().enumerate() {
                    fp.scatter(pv, Some(&mut *gp), channels, res, &g[n * channels..(n + 1) * channels]);
                }
            }
        }),
    ))
}
