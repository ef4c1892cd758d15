extern crate std;

use alloc::vec;
use alloc::vec::Vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn grad_of(f: impl Fn(&mut Tape, Var) -> Var, x: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::scalar(x));
    let y = f(&mut tape, v);
    tape.backward(y).unwrap().wrt(v).unwrap()[0]
}

#[test]
fn square_gradient() {
    assert_eq!(grad_of(|t, x| t.square(x), 3.0), 6.0);
}

#[test]
fn sigmoid_gradient_at_zero() {
    assert_eq!(grad_of(|t, x| t.sigmoid(x), 0.0), 0.25);
}

#[test]
fn composite_matches_finite_difference() {
    let f = |t: &mut Tape, x: Var| -> crate::Result<Var> {
        let two_x = t.scale(x, 2.0);
        let sp = t.softplus(two_x);
        let s = t.sin(x);
        let xs = t.mul(x, s)?;
        let y = t.add(sp, xs)?;
        Ok(t.sum(y))
    };
    let report = finite_diff_report(f, &[0.7], 1e-4).unwrap();
    let (a, n) = (report.analytic[0], report.numeric[0]);
    assert!((a - n).abs() / n.abs() < 1e-5, "{a} vs {n}");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.square(x);
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.square(x);
    let mut grads = tape.backward(y).unwrap();
    tape.backward_accumulate(y, &mut grads).unwrap();
    assert_eq!(grads.wrt(x).unwrap()[0], 12.0);
}

#[test]
fn detached_and_constant_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let d = tape.detach(x);
    let a = tape.mul(x, c).unwrap();
    let b = tape.mul(a, d).unwrap();
    let grads = tape.backward(b).unwrap();
    assert!(grads.wrt(c).is_none());
    assert!(grads.wrt(d).is_none());
    // d(x * 5 * x_detached)/dx = 5 * 2
    assert_eq!(grads.wrt(x).unwrap()[0], 10.0);
}

#[test]
fn every_reachable_leaf_gets_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::from_vec(vec![1.0, -2.0]));
    let b = tape.leaf(Tensor::from_vec(vec![0.5, 0.25]));
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &[0.5, 0.25]);
    assert_eq!(g.wrt(b).unwrap(), &[1.0, -2.0]);
}

#[test]
fn finite_diff_check_sum_of_squares_and_constant() {
    let sq = |t: &mut Tape, x: Var| -> crate::Result<Var> {
        let s = t.square(x);
        Ok(t.sum(s))
    };
    let err = finite_diff_check(sq, &[0.3, -1.2, 2.5, 0.0], 1e-4).unwrap();
    assert!(err < 1e-6, "{err}");
    let constant = |t: &mut Tape, _x: Var| -> crate::Result<Var> { Ok(t.scalar(4.0)) };
    assert_eq!(finite_diff_check(constant, &[1.0, 2.0], 1e-4).unwrap(), 0.0);
}

#[test]
fn finite_diff_check_reports_non_finite_coordinate() {
    let f = |t: &mut Tape, x: Var| -> crate::Result<Var> {
        let l = t.ln(x);
        Ok(t.sum(l))
    };
    // coordinate 1 sits within one step of 0: ln(x - h) is NaN
    assert_eq!(finite_diff_check(f, &[1.0, 5e-5], 1e-4), Err(Error::NonFiniteAt(1)));
}

#[test]
fn adam_zero_gradient_fresh_state_is_identity() {
    let mut p = Tensor::from_vec(vec![1.0, -2.0]);
    let mut st = AdamState::new(AdamConfig::default(), &[&p]);
    for _ in 0..3 {
        st.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
    }
    assert_eq!(p.data(), &[1.0, -2.0]);
    assert_eq!(st.t, 3);
    assert_eq!(st.m[0].data(), &[0.0, 0.0]);
}

#[test]
fn adam_moments_decay_under_zero_gradient() {
    let mut p = Tensor::from_vec(vec![1.0]);
    let mut st = AdamState::new(AdamConfig::default(), &[&p]);
    st.step(&mut [&mut p], &[Tensor::from_vec(vec![0.5])]).unwrap();
    let v1 = st.v[0].data()[0];
    st.step(&mut [&mut p], &[Tensor::from_vec(vec![0.0])]).unwrap();
    assert_eq!(st.v[0].data()[0], 0.99 * v1);
    assert_eq!(st.m[0].data()[0], 0.0);
}

#[test]
fn adam_first_step_moves_by_lr_against_sign() {
    let cfg = AdamConfig::default();
    let mut p = Tensor::from_vec(vec![0.0, 0.0]);
    let mut st = AdamState::new(cfg, &[&p]);
    st.step(&mut [&mut p], &[Tensor::from_vec(vec![0.3, -7.0])]).unwrap();
    // m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    let expect0 = -cfg.lr * 0.3 / (0.3 + cfg.eps);
    let expect1 = cfg.lr * 7.0 / (7.0 + cfg.eps);
    assert!((p.data()[0] - expect0).abs() < 1e-15);
    assert!((p.data()[1] - expect1).abs() < 1e-15);
    assert!((p.data()[0].abs() - cfg.lr).abs() < 1e-8);
}

#[test]
fn adam_constant_gradient_second_step_not_larger() {
    let cfg = AdamConfig::default();
    let mut p = Tensor::from_vec(vec![0.0]);
    let mut st = AdamState::new(cfg, &[&p]);
    let g = [Tensor::from_vec(vec![1.5])];
    st.step(&mut [&mut p], &g).unwrap();
    let first = p.data()[0].abs();
    st.step(&mut [&mut p], &g).unwrap();
    let second = p.data()[0].abs() - first;
    // closed form: both bias-corrected moments equal g and g^2 exactly
    assert!(second <= first * 1.01, "{second} vs {first}");
    assert!((second - first).abs() / first < 0.01);
}

#[test]
fn adam_rejects_nan_without_update() {
    let mut p = Tensor::from_vec(vec![1.0, 2.0]);
    let mut st = AdamState::new(AdamConfig::default(), &[&p]);
    let r = st.step(&mut [&mut p], &[Tensor::from_vec(vec![0.1, f64::NAN])]);
    assert!(matches!(r, Err(Error::NonFinite { .. })));
    assert_eq!(p.data(), &[1.0, 2.0]);
    assert_eq!(st.t, 0);
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

/// Every elementwise primitive against central differences on random inputs.
#[test]
fn elementwise_ops_match_finite_differences() {
    type Op = fn(&mut Tape, Var) -> Var;
    let ops: Vec<(&str, Op, bool)> = vec![
        ("square", |t, x| t.square(x), false),
        ("exp", |t, x| t.exp(x), false),
        ("sin", |t, x| t.sin(x), false),
        ("cos", |t, x| t.cos(x), false),
        ("tanh", |t, x| t.tanh(x), false),
        ("sigmoid", |t, x| t.sigmoid(x), false),
        ("softplus", |t, x| t.softplus(x), false),
        ("leaky_relu", |t, x| t.leaky_relu(x, 0.2), false),
        ("abs", |t, x| t.abs(x), false),
        ("tan", |t, x| t.tan(x), false),
        ("scale", |t, x| t.scale(x, -1.7), false),
        ("ln", |t, x| t.ln(x), true),
        ("sqrt", |t, x| t.sqrt(x), true),
        ("recip", |t, x| t.recip(x), true),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cases = 0;
    for (name, op, positive) in ops {
        for _ in 0..10 {
            let mut x = randn(&mut rng, 5);
            if positive {
                x.iter_mut().for_each(|v| *v = v.abs() + 0.3);
            } else {
                // keep clear of kinks at 0
                x.iter_mut().for_each(|v| if v.abs() < 1e-2 { *v += 0.1 });
            }
            let weights = randn(&mut rng, 5);
            let f = |t: &mut Tape, v: Var| -> crate::Result<Var> {
                let y = op(t, v);
                let w = t.constant(Tensor::from_vec(weights.clone()));
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            };
            let r = finite_diff_report(f, &x, 1e-5).unwrap();
            let err = r.max_norm_rel_error();
            assert!(err < 1e-4, "{name}: {err} {r:?}");
            cases += 1;
        }
    }
    assert!(cases >= 100);
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let x = randn(&mut rng, 24);
        let w = randn(&mut rng, 24);
        let f = |t: &mut Tape, v: Var| -> crate::Result<Var> {
            let a = t.reshape(v, &[2, 3, 4])?;
            let s0 = t.slice(a, 2, 1, 2)?; // [2,3,2]
            let s1 = t.slice(a, 1, 0, 2)?; // [2,2,4]
            let s1 = t.reshape(s1, &[2, 2, 4])?;
            let s1r = t.slice(s1, 2, 0, 2)?; // [2,2,2]
            let c = t.concat(1, &[s0, s1r])?; // [2,5,2]
            let flat = t.reshape(c, &[20])?;
            let g = t.gather(flat, &[3, 3, 0, 19, 7, 12])?;
            let m = t.reshape(a, &[6, 4])?;
            let rows = t.select_rows(m, &[5, 0, 5])?;
            let rs = t.sum_last(rows); // [3]
            let rep = t.repeat_last(rs, 2); // [3,2]
            let rep = t.reshape(rep, &[6])?;
            let gg = t.mul(g, rep)?;
            let wv = t.constant(Tensor::from_vec(w[..6].to_vec()));
            let q = t.div(gg, wv)?;
            let d = t.sub(q, g)?;
            let sq = t.square(d);
            Ok(t.mean(sq))
        };
        let r = finite_diff_report(f, &x, 1e-5).unwrap();
        assert!(r.max_norm_rel_error() < 1e-4, "case {case}: {r:?}");
    }
}

#[test]
fn matmul_linear_and_conv_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..12 {
        let stride = 1 + case % 2;
        let pad = case % 3;
        // x: [2,2,5,5] (100), w: [3,2,3,3] (54), b: [3]
        let params = randn(&mut rng, 100 + 54 + 3 + 2 * 3 * 4 * 4 + 2 + 12);
        let f = move |t: &mut Tape, v: Var| -> crate::Result<Var> {
            let x = t.slice(v, 0, 0, 100)?;
            let x = t.reshape(x, &[2, 2, 5, 5])?;
            let w = t.slice(v, 0, 100, 54)?;
            let w = t.reshape(w, &[3, 2, 3, 3])?;
            let b = t.slice(v, 0, 154, 3)?;
            let y = t.conv2d(x, w, b, stride, pad)?;
            let wt = t.slice(v, 0, 157, 96)?;
            let wt = t.reshape(wt, &[3, 2, 4, 4])?;
            let bt = t.slice(v, 0, 253, 2)?;
            let z = t.conv_transpose2d(y, wt, bt, 2, 1)?;
            let zs = t.tanh(z);
            let n = t.value(zs).len();
            let zf = t.reshape(zs, &[2, n / 2])?;
            let m = t.slice(v, 0, 255, 12)?;
            let cols = n / 2;
            let mw = t.reshape(m, &[2, 6])?;
            let pick = t.slice(zf, 1, 0, 2)?;
            let lin = t.matmul(pick, mw)?; // [2,6]
            let bias = t.slice(v, 0, 0, 6)?;
            let lb = t.add_bias(lin, bias)?;
            let s1 = t.sum(lb);
            let s2 = t.square(zf);
            let s2 = t.mean(s2);
            let _ = cols;
            t.add(s1, s2)
        };
        let r = finite_diff_report(f, &params, 1e-5).unwrap();
        assert!(r.max_norm_rel_error() < 1e-4, "case {case}: {}", r.max_norm_rel_error());
    }
}

/// Direct nested-loop convolution used as an independent oracle.
fn naive_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], s: usize, p: usize) -> Vec<f64> {
    let [n, ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for kh in 0..k {
                            for kw in 0..k {
                                let iy = (y * s + kh) as isize - p as isize;
                                let ix = (xx * s + kw) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * ci + c) * k + kh) * k + kw]
                                    * x[((bi * ci + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((bi * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (s, p, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 1), (3, 2, 4)] {
        let xs = [2, 3, 7, 6];
        let ws = [4, 3, k, k];
        let x = randn(&mut rng, xs.iter().product());
        let w = randn(&mut rng, ws.iter().product());
        let b = randn(&mut rng, 4);
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new(&xs, x.clone()).unwrap());
        let wv = t.constant(Tensor::new(&ws, w.clone()).unwrap());
        let bv = t.constant(Tensor::from_vec(b.clone()));
        let y = t.conv2d(xv, wv, bv, s, p).unwrap();
        let expect = naive_conv(&x, xs, &w, ws, &b, s, p);
        for (a, e) in t.data(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn linearity_of_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = randn(&mut rng, 6);
    let grad = |a: f64, b: f64| {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(x0.clone()));
        let f = t.sin(x);
        let f = t.sum(f);
        let g = t.softplus(x);
        let g = t.square(g);
        let g = t.sum(g);
        let fa = t.scale(f, a);
        let gb = t.scale(g, b);
        let l = t.add(fa, gb).unwrap();
        t.backward(l).unwrap().wrt(x).unwrap().to_vec()
    };
    let (gf, gg, gc) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(2.5, -0.7));
    for i in 0..6 {
        assert!((gc[i] - (2.5 * gf[i] - 0.7 * gg[i])).abs() < 1e-12);
    }
}

#[test]
fn determinism_is_bitwise() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = randn(&mut rng, 8);
        let mut t = Tape::new();
        let v = t.leaf(Tensor::from_vec(x));
        let s = t.softplus(v);
        let m = t.reshape(s, &[2, 4]).unwrap();
        let w = t.leaf(Tensor::from_vec(randn(&mut rng, 12)).reshaped(&[4, 3]).unwrap());
        let y = t.matmul(m, w).unwrap();
        let y = t.tanh(y);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        (t.value(l).item().to_bits(), g.wrt(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softplus_sigmoid_chain_gradient(xs in proptest::collection::vec(-4.0f64..4.0, 1..6)) {
        let f = |t: &mut Tape, v: Var| -> crate::Result<Var> {
            let a = t.sigmoid(v);
            let b = t.softplus(v);
            let c = t.mul(a, b)?;
            let d = t.tanh(c);
            Ok(t.sum(d))
        };
        let r = finite_diff_report(f, &xs, 1e-5).unwrap();
        prop_assert!(r.max_norm_rel_error() < 1e-4);
    }

    #[test]
    fn matmul_gradient(a in proptest::collection::vec(-2.0f64..2.0, 6), b in proptest::collection::vec(-2.0f64..2.0, 6)) {
        let mut p = a.clone();
        p.extend(b);
        let f = |t: &mut Tape, v: Var| -> crate::Result<Var> {
            let x = t.slice(v, 0, 0, 6)?;
            let x = t.reshape(x, &[2, 3])?;
            let y = t.slice(v, 0, 6, 6)?;
            let y = t.reshape(y, &[3, 2])?;
            let z = t.matmul(x, y)?;
            let z = t.square(z);
            Ok(t.sum(z))
        };
        let r = finite_diff_report(f, &p, 1e-5).unwrap();
        prop_assert!(r.max_norm_rel_error() < 1e-4);
    }
}
