//! Patch ray generation, volumetric integration of color and depth, and
//! depth normalization.

mod fused;

pub use fused::{render_tape, RenderStats, OUT_CHANNELS};

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{View, ViewVars};
use crate::diffmath::{Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::math;
use crate::scene::{Decoded, SceneDecoder, TriPlane};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub t_near: f64,
    pub t_far: f64,
    pub n_steps: usize,
    pub background: [f64; 3],
    /// Multiplier on decoded density.
    pub density_scale: f64,
    /// Half-width of the world cube mapped onto the tri-plane cube.
    pub scene_extent: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { t_near: 0.75, t_far: 1.25, n_steps: 48, background: [1.0; 3], density_scale: 10.0, scene_extent: 0.5 }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_near >= 0.0 && self.t_near < self.t_far && self.t_far.is_finite()) {
            return Err(invalid("need 0 <= t_near < t_far"));
        }
        if self.n_steps < 2 {
            return Err(invalid("n_steps must be at least 2"));
        }
        if !(self.density_scale > 0.0 && self.scene_extent > 0.0) {
            return Err(invalid("density_scale and scene_extent must be positive"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.t_far - self.t_near) / self.n_steps as f64
    }

    /// Sample distance of interval `i` at relative offset `u` in `[0, 1)`.
    #[inline]
    pub fn sample_t(&self, i: usize, u: f64) -> f64 {
        self.t_near + (i as f64 + u) * self.step()
    }
}

/// Sub-square `[dx, dx + s] x [dy, dy + s]` of the unit image, sampled at
/// `h x w` pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
    pub h: usize,
    pub w: usize,
}

impl PatchSpec {
    pub fn full(h: usize, w: usize) -> Self {
        Self { scale: 1.0, dx: 0.0, dy: 0.0, h, w }
    }

    pub fn validate(&self) -> Result<()> {
        const TOL: f64 = 1e-12;
        let ok = self.scale > 0.0
            && self.scale <= 1.0
            && self.dx >= -TOL
            && self.dy >= -TOL
            && self.dx + self.scale <= 1.0 + TOL
            && self.dy + self.scale <= 1.0 + TOL
            && self.h >= 1
            && self.w >= 1;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("patch outside the unit image: {self:?}")))
        }
    }

    /// Uniform scale in `[s_min, 1]`, then uniform offsets.
    pub fn random(rng: &mut impl Rng, s_min: f64, h: usize, w: usize) -> Self {
        let scale = if s_min >= 1.0 { 1.0 } else { rng.random_range(s_min..=1.0) };
        let free = 1.0 - scale;
        Self { scale, dx: free * rng.random::<f64>(), dy: free * rng.random::<f64>(), h, w }
    }

    pub fn rays(&self) -> usize {
        self.h * self.w
    }

    /// Normalized device coordinates of pixel `(i, j)`: x right, y up, in `[-1, 1]`.
    #[inline]
    pub fn ndc(&self, i: usize, j: usize) -> (f64, f64) {
        let x = 2.0 * (self.dx + self.scale * (j as f64 + 0.5) / self.w as f64) - 1.0;
        let y = 1.0 - 2.0 * (self.dy + self.scale * (i as f64 + 0.5) / self.h as f64);
        (x, y)
    }

    /// `(scale, dx, dy)`, the conditioning triple seen by the discriminator.
    pub fn psi(&self) -> [f64; 3] {
        [self.scale, self.dx, self.dy]
    }
}

/// Row-major rays of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub t_near: f64,
    pub t_far: f64,
    pub h: usize,
    pub w: usize,
}

#[inline]
fn pixel_dir(view_f: [f64; 3], right: [f64; 3], up: [f64; 3], a: f64, b: f64) -> [f64; 3] {
    let v = [
        view_f[0] + a * right[0] + b * up[0],
        view_f[1] + a * right[1] + b * up[1],
        view_f[2] + a * right[2] + b * up[2],
    ];
    let n = math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn gen_rays(view: &View, fov: f64, patch: &PatchSpec, cfg: &RenderConfig) -> Result<RayBatch> {
    patch.validate()?;
    let th = math::tan(0.5 * fov);
    let mut dirs = Vec::with_capacity(patch.rays());
    for i in 0..patch.h {
        for j in 0..patch.w {
            let (x, y) = patch.ndc(i, j);
            dirs.push(pixel_dir(view.forward, view.right, view.up, x * th, y * th));
        }
    }
    Ok(RayBatch {
        origins: vec![view.origin; patch.rays()],
        dirs,
        t_near: cfg.t_near,
        t_far: cfg.t_far,
        h: patch.h,
        w: patch.w,
    })
}

/// Differentiable ray directions `[B, R, 3]` from view frames and the
/// per-sample field of view `fov: [B]`.
pub fn ray_dirs_tape(tape: &mut Tape, view: &ViewVars, fov: Var, patches: &[PatchSpec]) -> Result<Var> {
    let b = patches.len();
    if b == 0 || tape.shape(fov) != [b] || tape.shape(view.forward) != [b, 3] {
        return Err(shape_err("ray_dirs_tape", format!("fov {:?}, {b} patches", tape.shape(fov))));
    }
    let r = patches[0].rays();
    for p in patches {
        p.validate()?;
        if p.rays() != r || p.h != patches[0].h {
            return Err(invalid("all patches in a batch must share a resolution"));
        }
    }
    let ndc: Vec<(f64, f64)> =
        patches.iter().flat_map(|p| (0..p.h).flat_map(move |i| (0..p.w).map(move |j| p.ndc(i, j)))).collect();
    let half = tape.scale(fov, 0.5);
    let th = tape.tan(half);
    let (rv, uv, fv, tv) = (view.right, view.up, view.forward, th);
    let (rd, ud, fd, td) = (tape.data(rv), tape.data(uv), tape.data(fv), tape.data(tv));
    let mut out = vec![0.0; b * r * 3];
    for bi in 0..b {
        let g = |x: &[f64]| [x[bi * 3], x[bi * 3 + 1], x[bi * 3 + 2]];
        let (right, up, fwd) = (g(rd), g(ud), g(fd));
        for k in 0..r {
            let (x, y) = ndc[bi * r + k];
            let d = pixel_dir(fwd, right, up, x * td[bi], y * td[bi]);
            out[(bi * r + k) * 3..(bi * r + k) * 3 + 3].copy_from_slice(&d);
        }
    }
    let value = Tensor::new(&[b, r, 3], out)?;
    Ok(tape.custom(
        value,
        &[rv, uv, fv, tv],
        Box::new(move |g, vals, sink| {
            let (rd, ud, fd, td) = (vals.get(rv), vals.get(uv), vals.get(fv), vals.get(tv));
            let mut gr = vec![0.0; b * 3];
            let mut gu = vec![0.0; b * 3];
            let mut gf = vec![0.0; b * 3];
            let mut gt = vec![0.0; b];
            for bi in 0..b {
                let at = |x: &[f64], k: usize| x[bi * 3 + k];
                for k in 0..r {
                    let (x, y) = ndc[bi * r + k];
                    let (a, c) = (x * td[bi], y * td[bi]);
                    let v: [f64; 3] = core::array::from_fn(|m| at(fd, m) + a * at(rd, m) + c * at(ud, m));
                    let n = math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
                    let d = v.map(|q| q / n);
                    let gd = &g[(bi * r + k) * 3..(bi * r + k) * 3 + 3];
                    let dot = d[0] * gd[0] + d[1] * gd[1] + d[2] * gd[2];
                    let gv: [f64; 3] = core::array::from_fn(|m| (gd[m] - d[m] * dot) / n);
                    let mut gr_dot = 0.0;
                    let mut gu_dot = 0.0;
                    for m in 0..3 {
                        gf[bi * 3 + m] += gv[m];
                        gr[bi * 3 + m] += a * gv[m];
                        gu[bi * 3 + m] += c * gv[m];
                        gr_dot += gv[m] * at(rd, m);
                        gu_dot += gv[m] * at(ud, m);
                    }
                    gt[bi] += x * gr_dot + y * gu_dot;
                }
            }
            sink.add(rv, &gr);
            sink.add(uv, &gu);
            sink.add(fv, &gf);
            sink.add(tv, &gt);
        }),
    ))
}

/// Anything that yields color and density at a world point.
pub trait RadianceField {
    fn query(&self, xyz: [f64; 3]) -> Decoded;
}

/// A synthesized tri-plane with its decoder, queried in world coordinates.
#[derive(Debug, Clone)]
pub struct TriPlaneField<'a> {
    pub planes: &'a TriPlane,
    pub decoder: &'a SceneDecoder,
    pub density_scale: f64,
    pub scene_extent: f64,
}

impl<'a> TriPlaneField<'a> {
    pub fn new(planes: &'a TriPlane, decoder: &'a SceneDecoder, cfg: &RenderConfig) -> Self {
        Self { planes, decoder, density_scale: cfg.density_scale, scene_extent: cfg.scene_extent }
    }
}

impl RadianceField for TriPlaneField<'_> {
    fn query(&self, xyz: [f64; 3]) -> Decoded {
        let q = xyz.map(|v| v / self.scene_extent);
        let f = self.planes.lookup(q);
        let mut d = self.decoder.decode(&f.feature);
        d.sigma *= self.density_scale;
        d
    }
}

/// Density and color at every quadrature sample of a ray batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    /// `[R, S]`.
    pub sigma: Vec<f64>,
    /// `[R, S, 3]`.
    pub rgb: Vec<f64>,
    /// `[R, S]` sample distances.
    pub t: Vec<f64>,
    pub n_steps: usize,
    pub delta: f64,
    pub h: usize,
    pub w: usize,
}

/// Evaluates the field at interval midpoints, or at `offsets[r * S + i]`
/// within each interval when given.
pub fn sample_field(field: &impl RadianceField, rays: &RayBatch, n_steps: usize, offsets: Option<&[f64]>) -> Result<SampleGrid> {
    if n_steps < 2 {
        return Err(invalid("n_steps must be at least 2"));
    }
    let nr = rays.dirs.len();
    if let Some(o) = offsets {
        if o.len() != nr * n_steps {
            return Err(shape_err("sample_field", format!("{} offsets for {nr}x{n_steps}", o.len())));
        }
    }
    let delta = (rays.t_far - rays.t_near) / n_steps as f64;
    let mut grid = SampleGrid {
        sigma: vec![0.0; nr * n_steps],
        rgb: vec![0.0; nr * n_steps * 3],
        t: vec![0.0; nr * n_steps],
        n_steps,
        delta,
        h: rays.h,
        w: rays.w,
    };
    for r in 0..nr {
        let (o, d) = (rays.origins[r], rays.dirs[r]);
        for i in 0..n_steps {
            let k = r * n_steps + i;
            let u = offsets.map_or(0.5, |o| o[k]);
            let t = rays.t_near + (i as f64 + u) * delta;
            let s = field.query([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
            if !s.sigma.is_finite() {
                return Err(Error::NonFinite { term: alloc::string::String::from("density"), value: s.sigma });
            }
            grid.sigma[k] = s.sigma;
            grid.t[k] = t;
            grid.rgb[k * 3..k * 3 + 3].copy_from_slice(&s.rgb);
        }
    }
    Ok(grid)
}

/// Rendered patch: channel-first RGB, raw depth and opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOut {
    /// `[3, h, w]`.
    pub rgb: Vec<f64>,
    /// `[h, w]`, unnormalized `sum_i w_i t_i`.
    pub depth: Vec<f64>,
    /// `[h, w]`.
    pub weight: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

/// Alpha-composites a sample grid.
pub fn integrate(grid: &SampleGrid, background: [f64; 3]) -> RenderOut {
    let (s, nr) = (grid.n_steps, grid.h * grid.w);
    let mut out = RenderOut { rgb: vec![0.0; 3 * nr], depth: vec![0.0; nr], weight: vec![0.0; nr], h: grid.h, w: grid.w };
    for r in 0..nr {
        let mut trans = 1.0;
        let (mut acc, mut d, mut c) = (0.0, 0.0, [0.0; 3]);
        for i in 0..s {
            let k = r * s + i;
            let surv = math::exp(-grid.sigma[k] * grid.delta);
            let w = trans * (1.0 - surv);
            acc += w;
            d += w * grid.t[k];
            for ch in 0..3 {
                c[ch] += w * grid.rgb[k * 3 + ch];
            }
            trans *= surv;
        }
        for ch in 0..3 {
            out.rgb[ch * nr + r] = c[ch] + (1.0 - acc) * background[ch];
        }
        out.depth[r] = d;
        out.weight[r] = acc;
    }
    out
}

pub fn volume_render(field: &impl RadianceField, rays: &RayBatch, cfg: &RenderConfig) -> Result<RenderOut> {
    let grid = sample_field(field, rays, cfg.n_steps, None)?;
    Ok(integrate(&grid, cfg.background))
}

/// `2 (d - (t_n + t_f + b) / 2) / (t_f - t_n - b)`.
pub fn normalize_depth(d: f64, t_near: f64, t_far: f64, b: f64) -> Result<f64> {
    let den = t_far - t_near - b;
    if !(den > 0.0) {
        return Err(invalid(format!("depth normalization needs t_f - t_n - b > 0, got {den}")));
    }
    Ok((2.0 * d - t_near - t_far - b) / den)
}

/// Differentiable [`normalize_depth`] on any-shaped `d` with scalar shift `b`.
pub fn normalize_depth_tape(tape: &mut Tape, d: Var, b: Var, t_near: f64, t_far: f64) -> Result<Var> {
    if tape.value(b).len() != 1 {
        return Err(shape_err("normalize_depth_tape", format!("shift {:?}", tape.shape(b))));
    }
    let bv = tape.data(b)[0];
    let den = t_far - t_near - bv;
    let shape = tape.shape(d).to_vec();
    let out: Vec<f64> = tape.data(d).iter().map(|&x| normalize_depth(x, t_near, t_far, bv)).collect::<Result<_>>()?;
    Ok(tape.custom(
        Tensor::new(&shape, out)?,
        &[d, b],
        Box::new(move |g, vals, sink| {
            if let Some(gd) = sink.slot(d) {
                for (dst, gi) in gd.iter_mut().zip(g) {
                    *dst += 2.0 * gi / den;
                }
            }
            if sink.wants(b) {
                let ds = vals.get(d);
                let gb: f64 = ds.iter().zip(g).map(|(x, gi)| gi * 2.0 * (x - t_far) / (den * den)).sum();
                sink.add(b, &[gb]);
            }
        }),
    ))
}

/// Learnable depth shift `b = b_max * sigmoid(beta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthShift {
    pub beta: Tensor,
    pub b_max: f64,
}

impl DepthShift {
    /// `b_max = 0.9 * min((t_n + t_f) / 2, t_f - t_n)` keeps the
    /// normalization denominator positive.
    pub fn new(cfg: &RenderConfig, beta: f64) -> Self {
        let b_max = 0.9 * ((cfg.t_near + cfg.t_far) / 2.0).min(cfg.t_far - cfg.t_near);
        Self { beta: Tensor::from_vec(vec![beta]), b_max }
    }

    pub fn value(&self) -> f64 {
        self.b_max * math::sigmoid(self.beta.data()[0])
    }

    pub fn forward(&self, tape: &mut Tape, beta: Var) -> Var {
        let s = tape.sigmoid(beta);
        tape.scale(s, self.b_max)
    }
}
