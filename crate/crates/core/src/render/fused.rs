use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::RenderConfig;
use crate::diffmath::{Tape, Values, Var};
use crate::error::{shape_err, Error, Result};
use crate::math;
use crate::scene::{decoder_backward, decoder_raw, DecoderGrads, DecoderWeights, Footprint};
use crate::tensor::Tensor;

/// Rendered channels: red, green, blue, raw depth, opacity.
pub const OUT_CHANNELS: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Samples that fell outside the tri-plane cube and were clamped.
    pub clamped_samples: usize,
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    r: usize,
    s: usize,
    c: usize,
    p: usize,
    h: usize,
}

struct Params {
    t_near: f64,
    delta: f64,
    background: [f64; 3],
    density_scale: f64,
    inv_extent: f64,
}

/// Per-sample quantities of one ray, recomputed in the backward pass.
struct RayScratch {
    feat: Vec<f64>,
    pre: Vec<f64>,
    raw: Vec<[f64; 4]>,
    rgb: Vec<[f64; 3]>,
    sigma: Vec<f64>,
    t: Vec<f64>,
    prints: Vec<Footprint>,
    pres: Vec<f64>,
    feats: Vec<f64>,
}

impl RayScratch {
    fn new(d: Dims) -> Self {
        Self {
            feat: vec![0.0; d.c],
            pre: vec![0.0; d.h],
            raw: vec![[0.0; 4]; d.s],
            rgb: vec![[0.0; 3]; d.s],
            sigma: vec![0.0; d.s],
            t: vec![0.0; d.s],
            prints: Vec::with_capacity(d.s),
            pres: vec![0.0; d.s * d.h],
            feats: vec![0.0; d.s * d.c],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn march(
    d: Dims,
    pr: &Params,
    planes: &[f64],
    dec: DecoderWeights<'_>,
    origin: &[f64],
    dir: &[f64],
    offsets: Option<&[f64]>,
    keep: bool,
    sc: &mut RayScratch,
) -> usize {
    let mut clamped = 0;
    sc.prints.clear();
    for i in 0..d.s {
        let u = offsets.map_or(0.5, |o| o[i]);
        let t = pr.t_near + (i as f64 + u) * pr.delta;
        let q = [
            (origin[0] + t * dir[0]) * pr.inv_extent,
            (origin[1] + t * dir[1]) * pr.inv_extent,
            (origin[2] + t * dir[2]) * pr.inv_extent,
        ];
        let fp = Footprint::new(q, d.p);
        clamped += fp.clamped as usize;
        fp.gather(planes, d.c, d.p, &mut sc.feat);
        let raw = decoder_raw(dec, &sc.feat, &mut sc.pre);
        sc.raw[i] = raw;
        sc.rgb[i] = [math::sigmoid(raw[0]), math::sigmoid(raw[1]), math::sigmoid(raw[2])];
        sc.sigma[i] = pr.density_scale * math::softplus(raw[3]);
        sc.t[i] = t;
        if keep {
            sc.prints.push(fp);
            sc.pres[i * d.h..(i + 1) * d.h].copy_from_slice(&sc.pre);
            sc.feats[i * d.c..(i + 1) * d.c].copy_from_slice(&sc.feat);
        }
    }
    clamped
}

/// Fused differentiable tri-plane volume rendering.
///
/// * `planes: [B, 3, C, P, P]`
/// * `decoder`: `[w1 [C, H], b1 [H], w2 [H, 4], b2 [4]]`
/// * `origins: [B, 3]`, `dirs: [B, R, 3]`
/// * `offsets`: per-sample position inside each interval, `[B * R * S]`;
///   midpoints when `None`.
///
/// Returns `[B, 5, R]` (rgb, raw depth, opacity) with gradients to planes,
/// decoder weights, origins and directions.
pub fn render_tape(
    tape: &mut Tape,
    planes: Var,
    decoder: &[Var],
    origins: Var,
    dirs: Var,
    cfg: &RenderConfig,
    offsets: Option<Vec<f64>>,
) -> Result<(Var, RenderStats)> {
    cfg.validate()?;
    let (b, c, p) = match tape.shape(planes) {
        [b, 3, c, p, q] if p == q && *p >= 2 => (*b, *c, *p),
        s => return Err(shape_err("render_tape", format!("planes {s:?}"))),
    };
    let r = match tape.shape(dirs) {
        [bb, r, 3] if *bb == b => *r,
        s => return Err(shape_err("render_tape", format!("dirs {s:?}"))),
    };
    if tape.shape(origins) != [b, 3] || decoder.len() != 4 {
        return Err(shape_err("render_tape", format!("origins {:?}", tape.shape(origins))));
    }
    let h = tape.shape(decoder[1])[0];
    if tape.shape(decoder[0]) != [c, h] || tape.shape(decoder[2]) != [h, 4] || tape.shape(decoder[3]) != [4] {
        return Err(shape_err("render_tape", String::from("decoder weights")));
    }
    let s = cfg.n_steps;
    if let Some(o) = &offsets {
        if o.len() != b * r * s {
            return Err(shape_err("render_tape", format!("{} offsets", o.len())));
        }
    }
    let d = Dims { b, r, s, c, p, h };
    let pr = Params {
        t_near: cfg.t_near,
        delta: cfg.step(),
        background: cfg.background,
        density_scale: cfg.density_scale,
        inv_extent: 1.0 / cfg.scene_extent,
    };
    let [w1, b1, w2, b2] = [decoder[0], decoder[1], decoder[2], decoder[3]];

    let mut out = vec![0.0; b * OUT_CHANNELS * r];
    let mut stats = RenderStats::default();
    {
        let dec = DecoderWeights { w1: tape.data(w1), b1: tape.data(b1), w2: tape.data(w2), b2: tape.data(b2) };
        let (pl, og, dr) = (tape.data(planes), tape.data(origins), tape.data(dirs));
        let mut sc = RayScratch::new(d);
        let plane_len = 3 * c * p * p;
        for bi in 0..b {
            let pls = &pl[bi * plane_len..(bi + 1) * plane_len];
            let o = &og[bi * 3..bi * 3 + 3];
            for ri in 0..r {
                let ray = bi * r + ri;
                let off = offsets.as_deref().map(|o| &o[ray * s..(ray + 1) * s]);
                stats.clamped_samples += march(d, &pr, pls, dec, o, &dr[ray * 3..ray * 3 + 3], off, false, &mut sc);
                let mut trans = 1.0;
                let (mut acc, mut dep, mut col) = (0.0, 0.0, [0.0; 3]);
                for i in 0..s {
                    if !sc.sigma[i].is_finite() {
                        return Err(Error::NonFinite { term: String::from("density"), value: sc.sigma[i] });
                    }
                    let surv = math::exp(-sc.sigma[i] * pr.delta);
                    let w = trans * (1.0 - surv);
                    acc += w;
                    dep += w * sc.t[i];
                    for k in 0..3 {
                        col[k] += w * sc.rgb[i][k];
                    }
                    trans *= surv;
                }
                let base = bi * OUT_CHANNELS * r + ri;
                for k in 0..3 {
                    out[base + k * r] = col[k] + (1.0 - acc) * pr.background[k];
                }
                out[base + 3 * r] = dep;
                out[base + 4 * r] = acc;
            }
        }
    }
    let value = Tensor::new(&[b, OUT_CHANNELS, r], out)?;
    let inputs = [planes, w1, b1, w2, b2, origins, dirs];
    let var = tape.custom(
        value,
        &inputs,
        Box::new(move |g, vals, sink| backward(d, &pr, offsets.as_deref(), inputs, g, vals, sink)),
    );
    Ok((var, stats))
}

fn backward(
    d: Dims,
    pr: &Params,
    offsets: Option<&[f64]>,
    inputs: [Var; 7],
    g: &[f64],
    vals: &Values<'_>,
    sink: &mut crate::diffmath::GradSink<'_>,
) {
    let [planes, w1, b1, w2, b2, origins, dirs] = inputs;
    let dec = DecoderWeights { w1: vals.get(w1), b1: vals.get(b1), w2: vals.get(w2), b2: vals.get(b2) };
    let (pl, og, dr) = (vals.get(planes), vals.get(origins), vals.get(dirs));
    let (b, r, s, c, p, h) = (d.b, d.r, d.s, d.c, d.p, d.h);
    let plane_len = 3 * c * p * p;

    let mut gpl = sink.wants(planes).then(|| vec![0.0; pl.len()]);
    let mut gw1 = sink.wants(w1).then(|| vec![0.0; c * h]);
    let mut gb1 = sink.wants(b1).then(|| vec![0.0; h]);
    let mut gw2 = sink.wants(w2).then(|| vec![0.0; h * 4]);
    let mut gb2 = sink.wants(b2).then(|| vec![0.0; 4]);
    let want_o = sink.wants(origins);
    let want_d = sink.wants(dirs);
    let mut go = vec![0.0; b * 3];
    let mut gd = vec![0.0; b * r * 3];
    let need_pos = want_o || want_d;

    let mut sc = RayScratch::new(d);
    let mut v = vec![0.0; s];
    let mut w = vec![0.0; s];
    let mut trans_after = vec![0.0; s];
    let mut gpre = vec![0.0; h];
    let mut gfeat = vec![0.0; c];

    for bi in 0..b {
        let pls = &pl[bi * plane_len..(bi + 1) * plane_len];
        let o = &og[bi * 3..bi * 3 + 3];
        for ri in 0..r {
            let base = bi * OUT_CHANNELS * r + ri;
            let g_rgb = [g[base], g[base + r], g[base + 2 * r]];
            let (g_dep, g_acc) = (g[base + 3 * r], g[base + 4 * r]);
            if g_rgb == [0.0; 3] && g_dep == 0.0 && g_acc == 0.0 {
                continue;
            }
            let ray = bi * r + ri;
            let dir = &dr[ray * 3..ray * 3 + 3];
            let off = offsets.map(|o| &o[ray * s..(ray + 1) * s]);
            march(d, pr, pls, dec, o, dir, off, true, &mut sc);
            let bg_dot = g_rgb[0] * pr.background[0] + g_rgb[1] * pr.background[1] + g_rgb[2] * pr.background[2];
            let mut trans = 1.0;
            for i in 0..s {
                let surv = math::exp(-sc.sigma[i] * pr.delta);
                w[i] = trans * (1.0 - surv);
                trans *= surv;
                trans_after[i] = trans;
                let c_dot = g_rgb[0] * sc.rgb[i][0] + g_rgb[1] * sc.rgb[i][1] + g_rgb[2] * sc.rgb[i][2];
                v[i] = c_dot + g_dep * sc.t[i] + g_acc - bg_dot;
            }
            // suffix sums of w_i v_i
            let mut tail = 0.0;
            for i in (0..s).rev() {
                let g_sigma = pr.delta * (trans_after[i] * v[i] - tail);
                tail += w[i] * v[i];
                let raw = sc.raw[i];
                let mut graw = [0.0; 4];
                for k in 0..3 {
                    let ck = sc.rgb[i][k];
                    graw[k] = w[i] * g_rgb[k] * ck * (1.0 - ck);
                }
                graw[3] = g_sigma * pr.density_scale * math::sigmoid(raw[3]);
                if graw == [0.0; 4] {
                    continue;
                }
                let feat = &sc.feats[i * c..(i + 1) * c];
                let pre = &sc.pres[i * h..(i + 1) * h];
                let mut grads = DecoderGrads {
                    w1: gw1.as_deref_mut(),
                    b1: gb1.as_deref_mut(),
                    w2: gw2.as_deref_mut(),
                    b2: gb2.as_deref_mut(),
                };
                decoder_backward(dec, feat, pre, graw, &mut grads, &mut gpre, &mut gfeat);
                let gp = gpl.as_deref_mut().map(|x| &mut x[bi * plane_len..(bi + 1) * plane_len]);
                let gq = sc.prints[i].scatter(pls, gp, c, p, &gfeat);
                if need_pos {
                    let t = sc.t[i];
                    for k in 0..3 {
                        let gx = gq[k] * pr.inv_extent;
                        go[bi * 3 + k] += gx;
                        gd[ray * 3 + k] += t * gx;
                    }
                }
            }
        }
    }
    if let Some(x) = gpl {
        sink.add(planes, &x);
    }
    for (var, buf) in [(w1, gw1), (b1, gb1), (w2, gw2), (b2, gb2)] {
        if let Some(x) = buf {
            sink.add(var, &x);
        }
    }
    if want_o {
        sink.add(origins, &go);
    }
    if want_d {
        sink.add(dirs, &gd);
    }
}
