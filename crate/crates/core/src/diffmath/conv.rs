//! 2-D convolution and transposed convolution (NCHW, square kernels).

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;

use super::tape::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Valid range of the "small-grid" index `a` such that `a * stride + k - pad`
/// lands inside a "big grid" of extent `big`.
#[inline]
fn valid_range(small: usize, big: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // a * stride + k - pad <= big - 1
    let hi = if big + pad > k { (big + pad - k - 1) / stride + 1 } else { 0 };
    (lo.min(small), hi.min(small))
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    c_small: usize,
    c_big: usize,
    h_small: usize,
    w_small: usize,
    h_big: usize,
    w_big: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

/// Accumulates `small[b, cs, a, a'] += Σ w(cs, cb) * big[b, cb, a*s+kh-p, a'*s+kw-p]`
/// where `weight_index(cs, cb)` gives the offset of the `k x k` kernel.
fn gather_big_into_small(
    g: &Geometry,
    big: &[f64],
    weight: &[f64],
    weight_index: impl Fn(usize, usize) -> usize,
    small: &mut [f64],
) {
    let (hs, ws, hb, wb, k, s, p) = (g.h_small, g.w_small, g.h_big, g.w_big, g.k, g.stride, g.pad);
    for b in 0..g.batch {
        for cs in 0..g.c_small {
            let so = (b * g.c_small + cs) * hs * ws;
            for cb in 0..g.c_big {
                let bo = (b * g.c_big + cb) * hb * wb;
                let wo = weight_index(cs, cb);
                for kh in 0..k {
                    let (a0, a1) = valid_range(hs, hb, s, kh, p);
                    for kw in 0..k {
                        let wv = weight[wo + kh * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (c0, c1) = valid_range(ws, wb, s, kw, p);
                        if c0 >= c1 {
                            continue;
                        }
                        for a in a0..a1 {
                            let ib = bo + (a * s + kh - p) * wb;
                            let row = &mut small[so + a * ws + c0..so + a * ws + c1];
                            let start = ib + c0 * s + kw - p;
                            if s == 1 {
                                let src = &big[start..start + row.len()];
                                row.iter_mut().zip(src).for_each(|(r, v)| *r += wv * v);
                            } else {
                                let src = big[start..].iter().step_by(s);
                                row.iter_mut().zip(src).for_each(|(r, v)| *r += wv * v);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather_big_into_small`]: scatters small-grid values into the big grid.
fn scatter_small_into_big(
    g: &Geometry,
    small: &[f64],
    weight: &[f64],
    weight_index: impl Fn(usize, usize) -> usize,
    big: &mut [f64],
) {
    let (hs, ws, hb, wb, k, s, p) = (g.h_small, g.w_small, g.h_big, g.w_big, g.k, g.stride, g.pad);
    for b in 0..g.batch {
        for cs in 0..g.c_small {
            let so = (b * g.c_small + cs) * hs * ws;
            for cb in 0..g.c_big {
                let bo = (b * g.c_big + cb) * hb * wb;
                let wo = weight_index(cs, cb);
                for kh in 0..k {
                    let (a0, a1) = valid_range(hs, hb, s, kh, p);
                    for kw in 0..k {
                        let wv = weight[wo + kh * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (c0, c1) = valid_range(ws, wb, s, kw, p);
                        if c0 >= c1 {
                            continue;
                        }
                        for a in a0..a1 {
                            let ib = bo + (a * s + kh - p) * wb;
                            let row = &small[so + a * ws + c0..so + a * ws + c1];
                            let start = ib + c0 * s + kw - p;
                            if s == 1 {
                                let dst = &mut big[start..start + row.len()];
                                dst.iter_mut().zip(row).for_each(|(d, v)| *d += wv * v);
                            } else {
                                let dst = big[start..].iter_mut().step_by(s);
                                dst.zip(row).for_each(|(d, v)| *d += wv * v);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient: `gw(cs, cb)[kh, kw] += Σ small[...] * big[...]`.
fn weight_grad(
    g: &Geometry,
    small: &[f64],
    big: &[f64],
    weight_index: impl Fn(usize, usize) -> usize,
    gw: &mut [f64],
) {
    let (hs, ws, hb, wb, k, s, p) = (g.h_small, g.w_small, g.h_big, g.w_big, g.k, g.stride, g.pad);
    for b in 0..g.batch {
        for cs in 0..g.c_small {
            let so = (b * g.c_small + cs) * hs * ws;
            for cb in 0..g.c_big {
                let bo = (b * g.c_big + cb) * hb * wb;
                let wo = weight_index(cs, cb);
                for kh in 0..k {
                    let (a0, a1) = valid_range(hs, hb, s, kh, p);
                    for kw in 0..k {
                        let (c0, c1) = valid_range(ws, wb, s, kw, p);
                        if c0 >= c1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for a in a0..a1 {
                            let ib = bo + (a * s + kh - p) * wb;
                            let row = &small[so + a * ws + c0..so + a * ws + c1];
                            let start = ib + c0 * s + kw - p;
                            if s == 1 {
                                let src = &big[start..start + row.len()];
                                acc += row.iter().zip(src).map(|(r, v)| r * v).sum::<f64>();
                            } else {
                                acc += row.iter().zip(big[start..].iter().step_by(s)).map(|(r, v)| r * v).sum::<f64>();
                            }
                        }
                        gw[wo + kh * k + kw] += acc;
                    }
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], batch: usize, plane: usize) {
    let c = bias.len();
    for b in 0..batch {
        for (ch, &bv) in bias.iter().enumerate() {
            let o = (b * c + ch) * plane;
            out[o..o + plane].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_bias_grad(g: &[f64], gb: &mut [f64], batch: usize, plane: usize) {
    let c = gb.len();
    for b in 0..batch {
        for (ch, dst) in gb.iter_mut().enumerate() {
            let o = (b * c + ch) * plane;
            *dst += g[o..o + plane].iter().sum::<f64>();
        }
    }
}

impl Tape {
    /// Cross-correlation `x: [B, Ci, H, W]` with `w: [Co, Ci, K, K]`, bias `[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sb != [sw[0]] || stride == 0 {
            return Err(shape_err("conv2d", format!("x {sx:?} w {sw:?} b {sb:?}")));
        }
        let (batch, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = Geometry {
            batch,
            c_small: co,
            c_big: ci,
            h_small: ho,
            w_small: wo,
            h_big: h,
            w_big: wd,
            k,
            stride,
            pad,
        };
        let widx = move |cs: usize, cb: usize| (cs * ci + cb) * k * k;
        let mut out = vec![0.0; batch * co * ho * wo];
        add_channel_bias(&mut out, self.data(b), batch, ho * wo);
        gather_big_into_small(&geo, self.data(x), self.data(w), widx, &mut out);
        let t = Tensor::new(&[batch, co, ho, wo], out)?;
        Ok(self.custom(
            t,
            &[x, w, b],
            Box::new(move |g, vals, sink| {
                if let Some(gb) = sink.slot(b) {
                    channel_bias_grad(g, gb, batch, ho * wo);
                }
                if let Some(gw) = sink.slot(w) {
                    weight_grad(&geo, g, vals.get(x), widx, gw);
                }
                if let Some(gx) = sink.slot(x) {
                    scatter_small_into_big(&geo, g, vals.get(w), widx, gx);
                }
            }),
        ))
    }

    /// Transposed convolution `x: [B, Ci, H, W]` with `w: [Ci, Co, K, K]`, bias `[Co]`;
    /// output extent `(H - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || sb != [sw[1]] || stride == 0 {
            return Err(shape_err("conv_transpose2d", format!("x {sx:?} w {sw:?} b {sb:?}")));
        }
        let (batch, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[1], sw[2]);
        if (h - 1) * stride + k < 2 * pad + 1 {
            return Err(shape_err("conv_transpose2d", format!("padding {pad} too large")));
        }
        let ho = (h - 1) * stride + k - 2 * pad;
        let wo = (wd - 1) * stride + k - 2 * pad;
        let geo = Geometry {
            batch,
            c_small: ci,
            c_big: co,
            h_small: h,
            w_small: wd,
            h_big: ho,
            w_big: wo,
            k,
            stride,
            pad,
        };
        let widx = move |cs: usize, cb: usize| (cs * co + cb) * k * k;
        let mut out = vec![0.0; batch * co * ho * wo];
        add_channel_bias(&mut out, self.data(b), batch, ho * wo);
        scatter_small_into_big(&geo, self.data(x), self.data(w), widx, &mut out);
        let t = Tensor::new(&[batch, co, ho, wo], out)?;
        Ok(self.custom(
            t,
            &[x, w, b],
            Box::new(move |g, vals, sink| {
                if let Some(gb) = sink.slot(b) {
                    channel_bias_grad(g, gb, batch, ho * wo);
                }
                if let Some(gw) = sink.slot(w) {
                    weight_grad(&geo, vals.get(x), g, widx, gw);
                }
                if let Some(gx) = sink.slot(x) {
                    gather_big_into_small(&geo, g, vals.get(w), widx, gx);
                }
            }),
        ))
    }
}
