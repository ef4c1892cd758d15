//! Differentiable tensor operations recorded on a [`Tape`].

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tape::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::math;
use crate::tensor::{numel, Tensor};

impl Tape {
    fn unary<F, D>(&mut self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let out = self.next_var();
        let xv = self.value(x);
        let y = Tensor::new(xv.shape(), xv.data().iter().map(|&a| f(a)).collect()).unwrap();
        self.custom(
            y,
            &[x],
            Box::new(move |g, vals, sink| {
                let (xs, ys) = (vals.get(x), vals.get(out));
                if let Some(gx) = sink.slot(x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * df(xs[i], ys[i]);
                    }
                }
            }),
        )
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let v: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), v)?;
        Ok(self.custom(
            t,
            &[a, b],
            Box::new(move |g, _, sink| {
                sink.add(a, g);
                sink.add(b, g);
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let v: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a), v)?;
        Ok(self.custom(
            t,
            &[a, b],
            Box::new(move |g, _, sink| {
                sink.add(a, g);
                if let Some(gb) = sink.slot(b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let v: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), v)?;
        Ok(self.custom(
            t,
            &[a, b],
            Box::new(move |g, vals, sink| {
                let (av, bv) = (vals.get(a), vals.get(b));
                if let Some(ga) = sink.slot(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = sink.slot(b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("div", a, b)?;
        let v: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x / y).collect();
        let t = Tensor::new(self.shape(a), v)?;
        Ok(self.custom(
            t,
            &[a, b],
            Box::new(move |g, vals, sink| {
                let (av, bv) = (vals.get(a), vals.get(b));
                if let Some(ga) = sink.slot(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bv[i];
                    }
                }
                if let Some(gb) = sink.slot(b) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, move |a| a * k, move |_, _| k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, move |a| a + k, |_, _| 1.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * a, |a, _| 2.0 * a)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, math::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |a, _| if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |a| 1.0 / a, |_, y| -y * y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, math::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, math::ln, |a, _| 1.0 / a)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, math::sin, |a, _| math::cos(a))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, math::cos, |a, _| -math::sin(a))
    }

    pub fn tan(&mut self, x: Var) -> Var {
        self.unary(x, math::tan, |_, y| 1.0 + y * y)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, math::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, math::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, math::softplus, |a, _| math::sigmoid(a))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, move |a| math::leaky_relu(a, slope), move |a, _| if a > 0.0 { 1.0 } else { slope })
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, move |a| a.clamp(lo, hi), move |a, _| if a > lo && a < hi { 1.0 } else { 0.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.custom(t, &[x], Box::new(move |g, _, sink| sink.add(x, g))))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.custom(
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _, sink| {
                if let Some(gx) = sink.slot(x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[n, d] -> [n]` sum over the last axis (any leading shape).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let rows = self.value(x).len() / d.max(1);
        let xs = self.data(x);
        let out: Vec<f64> = (0..rows).map(|r| xs[r * d..(r + 1) * d].iter().sum()).collect();
        let t = Tensor::new(&shape[..shape.len().saturating_sub(1)], out).unwrap();
        self.custom(
            t,
            &[x],
            Box::new(move |g, _, sink| {
                if let Some(gx) = sink.slot(x) {
                    for r in 0..rows {
                        gx[r * d..(r + 1) * d].iter_mut().for_each(|v| *v += g[r]);
                    }
                }
            }),
        )
    }

    /// `[n] -> [n, d]`, repeating each entry `d` times.
    pub fn repeat_last(&mut self, x: Var, d: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        shape.push(d);
        let xs = self.data(x);
        let out: Vec<f64> = xs.iter().flat_map(|&v| core::iter::repeat_n(v, d)).collect();
        let t = Tensor::new(&shape, out).unwrap();
        self.custom(
            t,
            &[x],
            Box::new(move |g, _, sink| {
                if let Some(gx) = sink.slot(x) {
                    for (r, dst) in gx.iter_mut().enumerate() {
                        *dst += g[r * d..(r + 1) * d].iter().sum::<f64>();
                    }
                }
            }),
        )
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += s * w;
                }
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.custom(
            t,
            &[a, b],
            Box::new(move |g, vals, sink| {
                let (av, bv) = (vals.get(a), vals.get(b));
                if let Some(ga) = sink.slot(a) {
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let bp = &bv[p * m..(p + 1) * m];
                            ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = sink.slot(b) {
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let s = av[i * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            for (d, x) in gb[p * m..(p + 1) * m].iter_mut().zip(gi) {
                                *d += s * x;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// `[n, d] + [d]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let d = *sx.last().unwrap_or(&0);
        if sb != [d] {
            return Err(shape_err("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let bv = self.data(b);
        let out: Vec<f64> = self.data(x).iter().enumerate().map(|(i, v)| v + bv[i % d]).collect();
        let t = Tensor::new(sx, out)?;
        Ok(self.custom(
            t,
            &[x, b],
            Box::new(move |g, _, sink| {
                sink.add(x, g);
                if let Some(gb) = sink.slot(b) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                }
            }),
        ))
    }

    /// Affine layer `x W + b` for `x: [n, i]`, `W: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Concatenation along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = vec![0.0; numel(&shape)];
        let mut offset = 0;
        for (&p, &sz) in parts.iter().zip(&sizes) {
            let src = self.data(p);
            let chunk = sz * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                out[dst..dst + chunk].copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
            }
            offset += sz;
        }
        let parts_owned: Vec<Var> = parts.to_vec();
        let t = Tensor::new(&shape, out)?;
        Ok(self.custom(
            t,
            parts,
            Box::new(move |g, _, sink| {
                let mut offset = 0;
                for (&p, &sz) in parts_owned.iter().zip(&sizes) {
                    let chunk = sz * inner;
                    if let Some(gp) = sink.slot(p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (d, s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[src..src + chunk]) {
                                *d += s;
                            }
                        }
                    }
                    offset += sz;
                }
            }),
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", format!("{shape:?} axis {axis} [{start}, {})", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let xs = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&xs[s..s + len * inner]);
        }
        let t = Tensor::new(&oshape, out)?;
        Ok(self.custom(
            t,
            &[x],
            Box::new(move |g, _, sink| {
                if let Some(gx) = sink.slot(x) {
                    for o in 0..outer {
                        let s = (o * full + start) * inner;
                        let c = len * inner;
                        for (d, v) in gx[s..s + c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                            *d += v;
                        }
                    }
                }
            }),
        ))
    }

    /// Flat gather: `out[i] = x[idx[i]]` (shape `[idx.len()]`).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("index {bad} out of {n}")));
        }
        let xs = self.data(x);
        let out: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let idx = idx.to_vec();
        Ok(self.custom(
            Tensor::from_vec(out),
            &[x],
            Box::new(move |g, _, sink| {
                if let Some(gx) = sink.slot(x) {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }),
        ))
    }

    /// Row gather for `x: [n, d]`: `out[r] = x[rows[r]]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("select_rows", format!("{shape:?}")));
        }
        let d = shape[1];
        let idx: Vec<usize> = rows.iter().flat_map(|&r| (r * d)..(r * d + d)).collect();
        let flat = self.gather(x, &idx)?;
        self.reshape(flat, &[rows.len(), d])
    }
}
