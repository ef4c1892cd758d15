extern crate std;

use alloc::vec;
use alloc::vec::Vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffmath::finite_diff_report;
use crate::nn::Module;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn uniform_yaw_draws_stay_in_range() {
    let p = ParamPrior::uniform(-PI, PI);
    let mut r = rng(1);
    assert!((0..10_000).map(|_| p.sample(&mut r)).all(|v| (-PI..=PI).contains(&v)));
}

#[test]
fn prior_sampling_is_seeded() {
    let prior = CameraPrior::default();
    assert_eq!(prior.sample(&mut rng(7)), prior.sample(&mut rng(7)));
}

#[test]
fn uniform_fov_mean_within_three_standard_errors() {
    let p = ParamPrior::uniform(0.2, 0.8);
    let mut r = rng(2);
    let n = 10_000;
    let mean = (0..n).map(|_| p.sample(&mut r)).sum::<f64>() / n as f64;
    let se = 0.6 / 12f64.sqrt() / (n as f64).sqrt();
    assert!((mean - 0.5).abs() < 3.0 * se, "{mean}");
}

#[test]
fn truncated_gaussian_never_escapes() {
    let p = ParamPrior { min: 0.0, max: 1.0, family: PriorFamily::TruncatedGaussian { mean: 0.9, std: 0.5 } };
    let mut r = rng(3);
    assert!((0..10_000).map(|_| p.sample(&mut r)).all(|v| (0.0..=1.0).contains(&v)));
}

#[test]
fn prior_validation() {
    assert!(CameraPrior::default().validate().is_ok());
    let mut bad = CameraPrior::default();
    bad.fov = ParamPrior::uniform(0.5, 0.5);
    assert!(bad.validate().is_err());
    let mut bad = CameraPrior::default();
    bad.lookat_radius = ParamPrior::uniform(0.0, 1.0);
    assert!(bad.validate().is_err());
}

fn batch(r: &mut ChaCha8Rng, prior: &CameraPrior, b: usize, z_dim: usize) -> (Vec<CameraParams>, Tensor, Vec<usize>) {
    let pp = prior.sample_batch(r, b);
    let z = Tensor::new(&[b, z_dim], (0..b * z_dim).map(|_| crate::math::std_normal(r)).collect()).unwrap();
    let classes = (0..b).map(|_| r.random_range(0..2)).collect();
    (pp, z, classes)
}

#[test]
fn generator_outputs_stay_inside_ranges() {
    let prior = CameraPrior::default();
    let mut r = rng(4);
    let mut g = CameraGenerator::new(&mut r, &CameraGenConfig::default(), 8, 2);
    // blow up the weights so the sigmoid saturates somewhere
    for t in g.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 5.0);
    }
    let (pp, z, c) = batch(&mut r, &prior, 256, 8);
    let out = g.generate(&prior, &pp, &z, &c).unwrap();
    for phi in &out {
        for (v, p) in phi.0.iter().zip(prior.params()) {
            assert!(*v >= p.min && *v <= p.max);
        }
    }
    assert_eq!(out, g.generate(&prior, &pp, &z, &c).unwrap());
}

#[test]
fn generator_rejects_non_finite_input() {
    let prior = CameraPrior::default();
    let mut r = rng(5);
    let g = CameraGenerator::new(&mut r, &CameraGenConfig::default(), 4, 2);
    let (mut pp, z, c) = batch(&mut r, &prior, 2, 4);
    pp[1].0[2] = f64::NAN;
    assert!(g.generate(&prior, &pp, &z, &c).is_err());
}

fn diag_of(g: &impl CameraMap, prior: &CameraPrior, pp: &[CameraParams], z: &Tensor, c: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let out = g.forward(&mut tape, &vars, prior, pp, zv, c, true).unwrap();
    tape.data(out.diag.unwrap()).to_vec()
}

#[test]
fn diagonal_derivative_matches_finite_differences() {
    let prior = CameraPrior::default();
    let mut r = rng(6);
    let g = CameraGenerator::new(&mut r, &CameraGenConfig::default(), 8, 2);
    let (pp, z, c) = batch(&mut r, &prior, 8, 8);
    let diag = diag_of(&g, &prior, &pp, &z, &c);
    let h = 1e-4;
    for i in 0..N_PARAMS {
        let (mut a, mut b) = (pp.clone(), pp.clone());
        a.iter_mut().for_each(|p| p.0[i] += h);
        b.iter_mut().for_each(|p| p.0[i] -= h);
        let fa = g.generate(&prior, &a, &z, &c).unwrap();
        let fb = g.generate(&prior, &b, &z, &c).unwrap();
        for n in 0..8 {
            let num = (fa[n].0[i] - fb[n].0[i]) / (2.0 * h);
            let an = diag[n * N_PARAMS + i];
            assert!((an - num).abs() <= 1e-3 * num.abs() + 1e-9, "param {i}: {an} vs {num}");
        }
    }
}

/// `phi = m + slope * (phi' - m)`: a toy generator with known slope.
struct Affine {
    slope: f64,
}

impl Module for Affine {
    fn params(&self) -> Vec<&Tensor> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![]
    }
    fn param_names(&self) -> Vec<alloc::string::String> {
        vec![]
    }
}

impl CameraMap for Affine {
    fn forward(&self, tape: &mut Tape, _: &[Var], prior: &CameraPrior, pp: &[CameraParams], _: Var, _: &[usize], with_diag: bool) -> Result<CameraOutput> {
        let mins = prior.mins();
        let data = pp.iter().flat_map(|p| (0..N_PARAMS).map(move |i| mins[i] + self.slope * (p.0[i] - mins[i]))).collect();
        let phi = tape.constant(Tensor::new(&[pp.len(), N_PARAMS], data)?);
        let diag = with_diag.then(|| tape.constant(Tensor::full(&[pp.len(), N_PARAMS], self.slope)));
        Ok(CameraOutput { phi, diag })
    }
}

fn penalty_values(slope: f64) -> (Vec<f64>, bool) {
    let prior = CameraPrior::default();
    let mut r = rng(8);
    let (pp, z, c) = batch(&mut r, &prior, 5, 3);
    let g = Affine { slope };
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let out = g.forward(&mut tape, &[], &prior, &pp, zv, &c, true).unwrap();
    let p = camera_gradient_penalty(&mut tape, out.diag.unwrap()).unwrap();
    (tape.data(p.per_param).to_vec(), p.collapsed)
}

#[test]
fn identity_map_penalty_is_two() {
    let (v, collapsed) = penalty_values(1.0);
    assert_eq!(v, vec![2.0; 6]);
    assert!(!collapsed);
}

#[test]
fn reciprocal_slopes_give_same_penalty() {
    assert_eq!(penalty_values(2.0).0, vec![2.5; 6]);
    assert_eq!(penalty_values(0.5).0, vec![2.5; 6]);
    assert_eq!(penalty_values(-2.0).0, vec![2.5; 6]);
}

#[test]
fn constant_head_is_flagged_as_collapsed() {
    let prior = CameraPrior::default();
    let mut r = rng(9);
    let mut g = CameraGenerator::new(&mut r, &CameraGenConfig::default(), 4, 2);
    // zero the output layer of every head
    let n = g.params().len();
    for (k, t) in g.params_mut().into_iter().enumerate() {
        if k % 6 >= 4 || k >= n {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let (pp, z, c) = batch(&mut r, &prior, 4, 4);
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, true);
    let zv = tape.constant(z);
    let out = g.forward(&mut tape, &vars, &prior, &pp, zv, &c, true).unwrap();
    let p = camera_gradient_penalty(&mut tape, out.diag.unwrap()).unwrap();
    assert!(p.collapsed);
    assert!(tape.data(p.per_param).iter().all(|&v| v == PENALTY_CAP));
    let total = tape.sum(p.per_param);
    let grads = tape.backward(total).unwrap();
    for v in vars {
        assert!(grads.wrt(v).is_none_or(|g| g.iter().all(|x| x.is_finite())));
    }
}

#[test]
fn penalty_parameter_gradient_matches_finite_differences() {
    let prior = CameraPrior::default();
    let mut r = rng(10);
    let g = CameraGenerator::new(&mut r, &CameraGenConfig { hidden: 6, layers: 3 }, 3, 2);
    let (pp, z, c) = batch(&mut r, &prior, 4, 3);
    let flat: Vec<f64> = g.params().iter().flat_map(|t| t.data().to_vec()).collect();
    let shapes: Vec<Vec<usize>> = g.params().iter().map(|t| t.shape().to_vec()).collect();
    let weights = [0.3, 0.3, 0.03, 0.003, 0.003, 0.003];
    let report = finite_diff_report(
        |tape, x| {
            let mut vars = Vec::new();
            let mut off = 0;
            for s in &shapes {
                let n: usize = s.iter().product();
                let piece = tape.slice(x, 0, off, n)?;
                vars.push(tape.reshape(piece, s)?);
                off += n;
            }
            let zv = tape.constant(z.clone());
            let out = g.forward(tape, &vars, &prior, &pp, zv, &c, true)?;
            let p = camera_gradient_penalty(tape, out.diag.unwrap())?;
            let w = tape.constant(Tensor::from_vec(weights.to_vec()));
            let wp = tape.mul(p.per_param, w)?;
            Ok(tape.sum(wp))
        },
        &flat,
        1e-6,
    )
    .unwrap();
    assert!(report.max_norm_rel_error() < 1e-3, "{}", report.max_norm_rel_error());
}

#[test]
fn identity_fit_brings_penalty_near_minimum() {
    let prior = CameraPrior::default();
    let mut r = rng(11);
    let mut g = CameraGenerator::new(&mut r, &CameraGenConfig::default(), 4, 2);
    let loss = g.fit_identity(&prior, &mut r, 400, 64).unwrap();
    assert!(loss < 0.01, "{loss}");
    let (pp, z, c) = batch(&mut r, &prior, 64, 4);
    let d = diag_of(&g, &prior, &pp, &z, &c);
    let mut tape = Tape::new();
    let dv = tape.constant(Tensor::new(&[64, 6], d).unwrap());
    let p = camera_gradient_penalty(&mut tape, dv).unwrap();
    assert!(tape.data(p.per_param).iter().all(|&v| v < 2.5), "{:?}", tape.data(p.per_param));
}

#[test]
fn documented_spherical_convention() {
    let phi = CameraParams([0.0, FRAC_PI_2, 0.7, 0.0, FRAC_PI_2, 0.0]);
    let v = build_view(&phi, 1.0).unwrap();
    let expect = [libm::sin(FRAC_PI_2) * libm::cos(0.0), libm::sin(FRAC_PI_2) * libm::sin(0.0), libm::cos(FRAC_PI_2)];
    assert_eq!(v.origin, expect);
    assert!((v.origin[0] - 1.0).abs() < 1e-15 && v.origin[1] == 0.0 && v.origin[2].abs() < 1e-15);
    assert_eq!(v.up.map(|x| (x * 1e12).round() / 1e12), [0.0, 0.0, 1.0]);
}

#[test]
fn centered_lookat_points_at_world_center() {
    let mut r = rng(12);
    let prior = CameraPrior::default();
    for _ in 0..100 {
        let mut phi = prior.sample(&mut r);
        phi.0[LOOKAT_RADIUS] = 0.0;
        let v = build_view(&phi, 1.0).unwrap();
        for k in 0..3 {
            assert!((v.forward[k] + v.origin[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn coincident_lookat_is_degenerate() {
    let phi = CameraParams([0.3, 1.2, 0.5, 0.3, 1.2, 1.0]);
    assert!(matches!(build_view(&phi, 1.0), Err(Error::DegenerateView(_))));
}

#[test]
fn tape_view_matches_plain_and_differentiates() {
    let prior = CameraPrior::default();
    let mut r = rng(13);
    let phis = prior.sample_batch(&mut r, 6);
    let mut tape = Tape::new();
    let pv = tape.constant(params_tensor(&phis));
    let vv = build_view_tape(&mut tape, pv, 1.3).unwrap();
    for (b, phi) in phis.iter().enumerate() {
        let v = build_view(phi, 1.3).unwrap();
        for k in 0..3 {
            assert!((tape.data(vv.origin)[b * 3 + k] - v.origin[k]).abs() < 1e-12);
            assert!((tape.data(vv.right)[b * 3 + k] - v.right[k]).abs() < 1e-12);
            assert!((tape.data(vv.up)[b * 3 + k] - v.up[k]).abs() < 1e-12);
            assert!((tape.data(vv.forward)[b * 3 + k] - v.forward[k]).abs() < 1e-12);
        }
    }
    let flat: Vec<f64> = phis.iter().flat_map(|p| p.0).collect();
    let w: Vec<f64> = (0..4 * 18).map(|_| r.random_range(-1.0..1.0)).collect();
    let report = finite_diff_report(
        |t, x| {
            let p = t.reshape(x, &[6, 6])?;
            let v = build_view_tape(t, p, 1.3)?;
            let all = t.concat(0, &[v.origin, v.right, v.up, v.forward])?;
            let all = t.reshape(all, &[72])?;
            let wv = t.constant(Tensor::from_vec(w.clone()));
            let m = t.mul(all, wv)?;
            Ok(t.sum(m))
        },
        &flat,
        1e-6,
    )
    .unwrap();
    assert!(report.max_norm_rel_error() < 1e-6, "{}", report.max_norm_rel_error());
}

#[test]
fn emd_quantile_grid_is_zero() {
    let n = 64;
    let s: Vec<f64> = (0..n).rev().map(|k| 2.0 + 3.0 * (k as f64 + 0.5) / n as f64).collect();
    assert!(emd_to_uniform(&s, 2.0, 5.0).abs() < 1e-15);
}

#[test]
fn emd_delta_at_midpoint_is_quarter() {
    assert!((emd_to_uniform(&[0.5; 64], 0.0, 1.0) - 0.25).abs() < 1e-12);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn emd_matches_exhaustive_transport_on_small_sets() {
    let mut r = rng(14);
    for n in 1..=6 {
        let perms = permutations(n);
        for _ in 0..20 {
            let s: Vec<f64> = (0..n).map(|_| r.random_range(-0.5..1.5)).collect();
            let best = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &k)| (s[i] - (k as f64 + 0.5) / n as f64).abs()).sum::<f64>() / n as f64)
                .fold(f64::INFINITY, f64::min);
            assert!((emd_to_uniform(&s, 0.0, 1.0) - best).abs() < 1e-12);
        }
    }
}

#[test]
fn emd_gradient_matches_finite_differences() {
    let mut r = rng(15);
    let s: Vec<f64> = (0..16).map(|_| r.random_range(0.0..1.0)).collect();
    let report = finite_diff_report(|t, x| emd_to_uniform_tape(t, x, 0.0, 1.0), &s, 1e-7).unwrap();
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn emd_reg_reports_each_parameter() {
    let prior = CameraPrior::default();
    let mut r = rng(16);
    let phis = prior.sample_batch(&mut r, 64);
    let mut tape = Tape::new();
    let pv = tape.constant(params_tensor(&phis));
    let e = emd_entropy_reg(&mut tape, pv, &prior).unwrap();
    let got = tape.data(e);
    for (i, p) in prior.params().iter().enumerate() {
        let col: Vec<f64> = phis.iter().map(|c| c.0[i]).collect();
        assert_eq!(got[i], emd_to_uniform(&col, p.min, p.max));
        assert!(got[i] < 0.1 * p.range());
    }
}

proptest! {
    #[test]
    fn view_basis_is_orthonormal_and_right_handed(
        yaw in -PI..PI, pitch in 0.0..PI, ly in -PI..PI, lp in 0.0..PI, lr in 0.0..0.3f64,
    ) {
        let v = build_view(&CameraParams([yaw, pitch, 0.5, ly, lp, lr]), 1.0).unwrap();
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let (r, u, f) = (v.right, v.up, v.forward);
        for a in [r, u, f] {
            prop_assert!((dot(a, a) - 1.0).abs() < 1e-12);
        }
        prop_assert!(dot(r, u).abs() < 1e-12 && dot(r, f).abs() < 1e-12 && dot(u, f).abs() < 1e-12);
        let nf = [-f[0], -f[1], -f[2]];
        let det = dot(r, cross(u, nf));
        prop_assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_at_least_two(g in prop::collection::vec(-100.0f64..100.0, 1..32)) {
        let mut tape = Tape::new();
        let n = g.len();
        let dv = tape.constant(Tensor::new(&[n, 1], g).unwrap());
        let p = camera_gradient_penalty(&mut tape, dv).unwrap();
        prop_assert!(tape.data(p.per_param)[0] >= 2.0);
    }

    #[test]
    fn emd_is_nonnegative(s in prop::collection::vec(-3.0f64..3.0, 1..80)) {
        prop_assert!(emd_to_uniform(&s, -1.0, 1.0) >= 0.0);
    }
}
