extern crate std;

use alloc::vec;
use alloc::vec::Vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::camera::CameraGenConfig;
use crate::depthsup::AdaptorConfig;
use crate::diffmath::finite_diff_report;
use crate::error::Error;
use crate::render::{PatchSpec, RenderConfig};
use crate::scene::SceneConfig;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_disc(seed: u64, res: usize) -> Discriminator {
    Discriminator::new(&mut rng(seed), &DiscConfig { channels: [3, 4, 4], feature_dim: 6 }, (res, res), 2, 3)
}

fn random_batch(seed: u64, b: usize, res: usize) -> (Tensor, Vec<usize>, Vec<[f64; 3]>) {
    let mut r = rng(seed);
    let x = (0..b * 4 * res * res).map(|_| r.random_range(-1.0..1.0)).collect();
    let classes = (0..b).map(|i| i % 2).collect();
    let psi = (0..b).map(|_| PatchSpec::random(&mut r, 0.5, res, res).psi()).collect();
    (Tensor::new(&[b, 4, res, res], x).unwrap(), classes, psi)
}

fn scores(d: &Discriminator, x: &Tensor, classes: &[usize], psi: &[[f64; 3]]) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new();
    let vars = d.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let (s, f) = d.forward(&mut t, &vars, xv, classes, psi).unwrap();
    (t.data(s).to_vec(), t.data(f).to_vec())
}

#[test]
fn discriminator_outputs_have_expected_shapes() {
    let d = small_disc(1, 8);
    let (x, c, p) = random_batch(2, 3, 8);
    let (s, f) = scores(&d, &x, &c, &p);
    assert_eq!(s.len(), 3);
    assert_eq!(f.len(), 9);
    assert_eq!(d.params().len(), 13);
    assert_eq!(d.param_names().len(), 13);
    assert_eq!(scores(&d, &x, &c, &p), (s, f));
}

#[test]
fn discriminator_uses_class_and_patch_conditioning() {
    let d = small_disc(3, 8);
    let (x, c, p) = random_batch(4, 2, 8);
    let (s, _) = scores(&d, &x, &c, &p);
    let flipped: Vec<usize> = c.iter().map(|k| 1 - k).collect();
    assert_ne!(scores(&d, &x, &flipped, &p).0, s);
    let moved: Vec<[f64; 3]> = p.iter().map(|q| [q[0] * 0.5, q[1], q[2]]).collect();
    assert_ne!(scores(&d, &x, &c, &moved).0, s);
}

#[test]
fn discriminator_rejects_bad_inputs() {
    let d = small_disc(5, 8);
    let mut t = Tape::new();
    let vars = d.bind(&mut t, false);
    let x = t.constant(Tensor::zeros(&[2, 4, 4, 4]));
    assert!(matches!(d.forward(&mut t, &vars, x, &[0, 1], &[[1.0, 0.0, 0.0]; 2]), Err(Error::Shape { .. })));
    let x = t.constant(Tensor::zeros(&[2, 3, 8, 8]));
    assert!(d.forward(&mut t, &vars, x, &[0, 1], &[[1.0, 0.0, 0.0]; 2]).is_err());
    let x = t.constant(Tensor::zeros(&[2, 4, 8, 8]));
    assert!(d.forward(&mut t, &vars, x, &[0], &[[1.0, 0.0, 0.0]; 2]).is_err());
}

#[test]
fn discriminator_input_gradient_matches_finite_differences() {
    let d = small_disc(6, 4);
    let (x, c, p) = random_batch(7, 2, 4);
    let rep = finite_diff_report(
        |t, v| {
            let vars = d.bind(t, false);
            let xv = t.reshape(v, &[2, 4, 4, 4])?;
            let (s, f) = d.forward(t, &vars, xv, &c, &p)?;
            let fs = t.sum(f);
            let fs = t.scale(fs, 0.3);
            let ss = t.sum(s);
            t.add(ss, fs)
        },
        x.data(),
        1e-6,
    )
    .unwrap();
    assert!(rep.max_norm_rel_error() < 1e-5, "{}", rep.max_norm_rel_error());
}

#[test]
fn adversarial_loss_examples() {
    let mut t = Tape::new();
    let r = t.leaf(Tensor::from_vec(vec![0.0, 0.0]));
    let f = t.leaf(Tensor::from_vec(vec![0.0, 0.0]));
    let (g, d) = adv_losses(&mut t, r, f).unwrap();
    let ln2 = core::f64::consts::LN_2;
    assert!((t.value(g).item() - ln2).abs() < 1e-12);
    assert!((t.value(d).item() - 2.0 * ln2).abs() < 1e-12);

    let mut t = Tape::new();
    let r = t.leaf(Tensor::from_vec(vec![0.0]));
    let f = t.leaf(Tensor::from_vec(vec![1.0]));
    let (g, _) = adv_losses(&mut t, r, f).unwrap();
    let grads = t.backward(g).unwrap();
    assert!((grads.wrt(f).unwrap()[0] + 0.268_941_421_369_995).abs() < 1e-12);
}

#[test]
fn distillation_loss_examples() {
    let mut t = Tape::new();
    let e = t.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let h = t.leaf(Tensor::zeros(&[2, 2]));
    let l = distill_loss(&mut t, e, h).unwrap();
    assert_eq!(t.value(l).item(), 15.0);
    let grads = t.backward(l).unwrap();
    assert_eq!(grads.wrt(h).unwrap(), &[-1.0, -2.0, -3.0, -4.0]);

    let e = t.constant(Tensor::zeros(&[0, 3]));
    let l = distill_loss(&mut t, e, e).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    let h = t.constant(Tensor::zeros(&[2, 3]));
    let e = t.constant(Tensor::zeros(&[2, 2]));
    assert!(distill_loss(&mut t, e, h).is_err());
}

#[test]
fn distillation_matches_elementwise_sum() {
    let mut t = Tape::new();
    let e = t.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let z = t.constant(Tensor::zeros(&[1, 2]));
    let l = distill_loss(&mut t, e, z).unwrap();
    assert_eq!(t.value(l).item(), 1.0);
    let l = distill_loss(&mut t, e, e).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    let mut r = rng(19);
    let a: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..16).map(|_| r.random_range(-2.0..2.0)).collect();
    let expect: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    let av = t.constant(Tensor::new(&[1, 16], a).unwrap());
    let bv = t.constant(Tensor::new(&[1, 16], b).unwrap());
    let l = distill_loss(&mut t, av, bv).unwrap();
    assert!((t.value(l).item() - expect).abs() < 1e-12);
}

#[test]
fn total_losses_with_zero_weights_and_monotonicity() {
    let zero = LossWeights { pos: 0.0, fov: 0.0, lookat: 0.0, dist: 0.0, r1: 0.0 };
    let gp = GeneratorLossParts { adv: 0.7, camera: [3.0; 6] };
    let dp = DiscriminatorLossParts { adv: 1.1, dist: 4.0, r1: 9.0 };
    assert_eq!(generator_loss(&gp, &zero), 0.7);
    assert_eq!(discriminator_loss(&dp, &zero), 1.1);
    let w = LossWeights::default();
    for i in 0..6 {
        let mut up = gp;
        up.camera[i] += 0.5;
        assert!(generator_loss(&up, &w) > generator_loss(&gp, &w));
    }
    assert!(discriminator_loss(&DiscriminatorLossParts { dist: 5.0, ..dp }, &w) > discriminator_loss(&dp, &w));
    assert!(discriminator_loss(&DiscriminatorLossParts { r1: 10.0, ..dp }, &w) > discriminator_loss(&dp, &w));
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    let ln2 = core::f64::consts::LN_2;
    let g = generator_loss(&GeneratorLossParts { adv: ln2, camera: [2.0; 6] }, &w);
    assert!((g - (ln2 + 2.0 * (2.0 * 0.3 + 0.03 + 3.0 * 0.003))).abs() < 1e-12);
    let d = discriminator_loss(&DiscriminatorLossParts { adv: 1.0, dist: 2.0, r1: 3.0 }, &w);
    assert!((d - 3.3).abs() < 1e-12);
    assert!(LossWeights { r1: -1.0, ..w.clone() }.validate().is_err());
    assert!(LossWeights { pos: f64::NAN, ..w }.validate().is_err());
}

#[test]
fn r1_vanishes_for_input_independent_scores() {
    let mut d = small_disc(8, 4);
    d.convs.iter_mut().for_each(|c| c.weight.data_mut().fill(0.0));
    d.fc.weight.data_mut().fill(0.0);
    let (x, c, p) = random_batch(9, 2, 4);
    let r1 = r1_penalty(&d, &x, &c, &p).unwrap();
    assert_eq!(r1.value, 0.0);
    assert!(r1.grads.iter().all(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn r1_of_linear_critic_is_hand_value() {
    let x = Tensor::new(&[1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
    let (v, g) = r1_value(&x, |t, xv| {
        let s = t.sum_last(xv);
        Ok(t.scale(s, 2.0))
    })
    .unwrap();
    assert_eq!(v, 8.0);
    assert_eq!(g, vec![2.0; 4]);
    let (v, _) = r1_value(&x, |t, _| Ok(t.constant(Tensor::from_vec(vec![1.0])))).unwrap();
    assert_eq!(v, 0.0);
}

/// Central-difference input gradient of the summed scores.
fn numeric_r1(d: &Discriminator, x: &Tensor, c: &[usize], p: &[[f64; 3]]) -> f64 {
    let b = x.shape()[0];
    let per = x.len() / b;
    let h = 1e-6;
    let mut total = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let (sp, sm) = (scores(d, &xp, c, p).0, scores(d, &xm, c, p).0);
        let g = (sp[i / per] - sm[i / per]) / (2.0 * h);
        total += g * g;
    }
    0.5 * total / b as f64
}

#[test]
fn r1_value_matches_finite_difference_input_gradient() {
    let d = small_disc(10, 4);
    let (x, c, p) = random_batch(11, 2, 4);
    let r1 = r1_penalty(&d, &x, &c, &p).unwrap();
    let n = numeric_r1(&d, &x, &c, &p);
    assert!(r1.value > 0.0);
    assert!((r1.value - n).abs() / n < 1e-3, "{} vs {n}", r1.value);
}

#[test]
fn r1_parameter_gradient_matches_finite_differences() {
    let d = small_disc(12, 4);
    let (x, c, p) = random_batch(13, 2, 4);
    let r1 = r1_penalty(&d, &x, &c, &p).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for (k, idx) in [(0usize, 5usize), (1, 0), (2, 11), (6, 3), (8, 2), (10, 4)] {
        let mut dp = d.clone();
        dp.params_mut()[k].data_mut()[idx] += h;
        let mut dm = d.clone();
        dm.params_mut()[k].data_mut()[idx] -= h;
        let num = (r1_penalty(&dp, &x, &c, &p).unwrap().value - r1_penalty(&dm, &x, &c, &p).unwrap().value) / (2.0 * h);
        let ana = r1.grads[k].data()[idx];
        assert!((ana - num).abs() <= 1e-3 * num.abs().max(1e-3), "param {k}[{idx}]: {ana} vs {num}");
        checked += 1;
    }
    assert_eq!(checked, 6);
}

#[test]
fn full_discriminator_loss_parameter_gradient() {
    let d = small_disc(14, 8);
    let (xr, c, p) = random_batch(15, 4, 8);
    let (xf, _, _) = random_batch(16, 4, 8);
    let e = Tensor::new(&[4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
    let w = LossWeights::default();
    let shape = d.fc.weight.shape().to_vec();
    let rep = finite_diff_report(
        |t, v| {
            let mut vars = d.bind(t, false);
            vars[6] = t.reshape(v, &shape)?;
            let xr = t.constant(xr.clone());
            let xf = t.constant(xf.clone());
            let (sr, eh) = d.forward(t, &vars, xr, &c, &p)?;
            let (sf, _) = d.forward(t, &vars, xf, &c, &p)?;
            let (_, l) = adv_losses(t, sr, sf)?;
            let ev = t.constant(e.clone());
            let dist = distill_loss(t, ev, eh)?;
            let dist = t.scale(dist, w.dist);
            t.add(l, dist)
        },
        d.fc.weight.data(),
        1e-6,
    )
    .unwrap();
    assert!(rep.max_norm_rel_error() < 1e-3, "{}", rep.max_norm_rel_error());
}

#[test]
fn teacher_is_deterministic_and_pooled() {
    let cfg = TeacherConfig { channels: [4, 4], dim: 5, seed: 3 };
    let a = TeacherExtractor::new(&cfg);
    let b = TeacherExtractor::new(&cfg);
    assert_eq!(a, b);
    let mut r = rng(17);
    let x = Tensor::new(&[2, 3, 8, 8], (0..384).map(|_| r.random::<f64>()).collect()).unwrap();
    let f = a.extract(&x).unwrap();
    assert_eq!(f.shape(), &[2, 5]);
    assert_eq!(f, b.extract(&x).unwrap());
    assert!(a.extract(&Tensor::zeros(&[2, 4, 8, 8])).is_err());
}

fn image(seed: u64, h: usize, w: usize, class: usize) -> RealImage {
    let mut r = rng(seed);
    RealImage {
        rgb: (0..3 * h * w).map(|_| r.random::<f64>()).collect(),
        depth: (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect(),
        h,
        w,
        class,
        features: None,
    }
}

#[test]
fn full_patch_at_native_resolution_copies_the_image() {
    let im = image(18, 6, 6, 0);
    let p = extract_patch(&im, &PatchSpec::full(6, 6)).unwrap();
    let expect: Vec<f64> = im.rgb.iter().chain(&im.depth).copied().collect();
    for (a, b) in p.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn dataset_validation() {
    assert!(RealDataset::new(vec![image(1, 4, 4, 2)], 2).is_err());
    let mut bad = image(1, 4, 4, 0);
    bad.depth.pop();
    assert!(RealDataset::new(vec![bad], 2).is_err());
    let mut with = image(2, 4, 4, 0);
    with.features = Some(vec![0.0; 3]);
    assert!(RealDataset::new(vec![with, image(3, 4, 4, 1)], 2).is_err());
}

pub(crate) fn tiny_model() -> ModelConfig {
    ModelConfig {
        scene: SceneConfig {
            z_dim: 4,
            n_classes: 2,
            w_dim: 8,
            mapping_width: 8,
            plane_channels: 3,
            plane_res: 8,
            synth_channels: 4,
            decoder_hidden: 8,
        },
        render: RenderConfig { n_steps: 6, ..RenderConfig::default() },
        camera: CameraGenConfig { hidden: 8, layers: 2 },
        adaptor: AdaptorConfig { filters: 3, kernel: 5 },
        disc: DiscConfig { channels: [3, 4, 4], feature_dim: 6 },
        teacher: TeacherConfig { channels: [3, 4], dim: 3, seed: 1 },
        ..ModelConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig { batch: 3, patch_res: 6, camera_warmup: 20, emd_samples: 8, ..TrainConfig::default() }
}

fn tiny_data() -> RealDataset {
    RealDataset::new((0..4).map(|i| image(40 + i, 12, 12, i as usize % 2)).collect(), 2).unwrap()
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let data = tiny_data();
    let run = |seed| {
        let mut s = TrainState::new(tiny_model(), tiny_train(), seed).unwrap();
        let m: Vec<StepMetrics> = (0..2).map(|_| s.train_step(&data).unwrap()).collect();
        (m, s.g.params().into_iter().cloned().collect::<Vec<_>>())
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a.0, run(6).0);
}

#[test]
fn training_step_updates_both_networks_and_reports_parts() {
    let data = tiny_data();
    let mut s = TrainState::new(tiny_model(), tiny_train(), 7).unwrap();
    let g0: Vec<Tensor> = s.g.params().into_iter().cloned().collect();
    let d0: Vec<Tensor> = s.d.params().into_iter().cloned().collect();
    let teacher = s.teacher.clone();
    let m = s.train_step(&data).unwrap();
    assert_eq!(s.step, 1);
    assert_eq!(m.selection.iter().sum::<usize>(), 3);
    let w = &s.train.weights;
    let d_total = discriminator_loss(&DiscriminatorLossParts { adv: m.d_adv, dist: m.dist, r1: m.r1 }, w);
    assert!((m.d_total - d_total).abs() < 1e-12);
    let g_total = generator_loss(&GeneratorLossParts { adv: m.g_adv, camera: m.camera }, w);
    assert!((m.g_total - g_total).abs() < 1e-12);
    assert!([m.d_adv, m.dist, m.r1, m.g_adv].iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(m.camera.iter().all(|v| *v >= 2.0 - 1e-9));
    for (a, b) in s.g.params().into_iter().zip(&g0) {
        assert_ne!(a, b);
    }
    let moved = s.d.params().into_iter().zip(&d0).filter(|(a, b)| a != b).count();
    assert_eq!(moved, d0.len());
    assert_eq!(s.teacher, teacher);
    let b_max = s.g.shift.b_max;
    assert!(m.shift > 0.0 && m.shift < b_max);
}

#[test]
fn lazy_r1_runs_on_interval_steps_only() {
    let data = tiny_data();
    let mut s = TrainState::new(tiny_model(), TrainConfig { r1_interval: 2, ..tiny_train() }, 8).unwrap();
    let r: Vec<f64> = (0..3).map(|_| s.train_step(&data).unwrap().r1).collect();
    assert!(r[0] > 0.0 && r[1] == 0.0 && r[2] > 0.0);
    let mut s = TrainState::new(tiny_model(), tiny_train(), 8).unwrap();
    assert!((0..2).all(|_| s.train_step(&data).unwrap().r1 > 0.0));
}

#[test]
fn disabled_depth_supervision_zeroes_depth_channels() {
    let model = tiny_model();
    let train = TrainConfig { depth_supervision: false, ..tiny_train() };
    let s = TrainState::new(model.clone(), train.clone(), 9).unwrap();
    let mut t = Tape::new();
    let gv = s.g.bind_vars(&mut t, false);
    let f = s.g.fakes(&mut t, &gv, &model, &train, &mut rng(1), 2, false).unwrap();
    let n = 36;
    let x = t.data(f.x);
    assert!(x.chunks(4 * n).all(|c| c[3 * n..].iter().all(|v| *v == 0.0)));
    assert!(t.data(f.depth_norm).iter().any(|v| *v != 0.0));
}

#[test]
fn fake_depth_is_normalized_rendered_depth_when_raw_is_chosen() {
    let model = tiny_model();
    let train = TrainConfig { p_raw: 1.0, ..tiny_train() };
    let s = TrainState::new(model.clone(), train.clone(), 10).unwrap();
    let mut t = Tape::new();
    let gv = s.g.bind_vars(&mut t, false);
    let f = s.g.fakes(&mut t, &gv, &model, &train, &mut rng(2), 2, true).unwrap();
    assert!(f.diag.is_some());
    assert!(f.choices.iter().all(|c| *c == crate::depthsup::DepthChoice::Raw));
    let n = 36;
    let x = t.data(f.x).to_vec();
    let dn = t.data(f.depth_norm);
    for b in 0..2 {
        assert_eq!(&x[b * 4 * n + 3 * n..(b + 1) * 4 * n], &dn[b * n..(b + 1) * n]);
    }
}

#[test]
fn emd_and_unregularized_variants_train() {
    let data = tiny_data();
    for reg in [CameraReg::Emd, CameraReg::None] {
        let mut s = TrainState::new(tiny_model(), TrainConfig { camera_reg: reg, ..tiny_train() }, 11).unwrap();
        let m = s.train_step(&data).unwrap();
        assert!(m.g_total.is_finite());
        if reg == CameraReg::None {
            assert_eq!(m.camera, [0.0; 6]);
        } else {
            assert!(m.camera.iter().all(|v| *v >= 0.0) && m.camera.iter().any(|v| *v > 0.0));
        }
    }
}

#[test]
fn zero_half_life_ema_tracks_weights() {
    let data = tiny_data();
    let mut s = TrainState::new(tiny_model(), TrainConfig { ema_half_life: 0.0, ..tiny_train() }, 12).unwrap();
    s.train_step(&data).unwrap();
    assert_eq!(s.ema_generator(), s.g);
    let mut s = TrainState::new(tiny_model(), tiny_train(), 12).unwrap();
    let before = s.g.clone();
    s.train_step(&data).unwrap();
    let e = s.ema_generator();
    assert_ne!(e, before);
    assert_ne!(e, s.g);
}

#[test]
fn non_finite_weights_surface_as_named_errors() {
    let data = tiny_data();
    let mut s = TrainState::new(tiny_model(), tiny_train(), 13).unwrap();
    s.d.score.bias.data_mut()[0] = f64::NAN;
    assert!(matches!(s.train_step(&data), Err(Error::NonFinite { .. })));
}

#[test]
fn invalid_training_configs_are_rejected() {
    for t in [
        TrainConfig { batch: 0, ..tiny_train() },
        TrainConfig { p_raw: 1.5, ..tiny_train() },
        TrainConfig { min_patch_scale: 0.0, ..tiny_train() },
        TrainConfig { r1_interval: 0, ..tiny_train() },
    ] {
        assert!(TrainState::new(tiny_model(), t, 0).is_err());
    }
    let s = TrainState::new(tiny_model(), tiny_train(), 0).unwrap();
    let mut s = s;
    assert!(s.train_step(&RealDataset::default()).is_err());
}

proptest! {
    #[test]
    fn adversarial_losses_are_positive_and_monotone(r in -8.0f64..8.0, f in -8.0f64..8.0, df in 0.01f64..2.0) {
        let eval = |f: f64| {
            let mut t = Tape::new();
            let rv = t.constant(Tensor::from_vec(vec![r]));
            let fv = t.constant(Tensor::from_vec(vec![f]));
            let (g, d) = adv_losses(&mut t, rv, fv).unwrap();
            (t.value(g).item(), t.value(d).item())
        };
        let (g0, d0) = eval(f);
        let (g1, d1) = eval(f + df);
        prop_assert!(g0 > 0.0 && d0 > 0.0);
        prop_assert!(g1 < g0);
        prop_assert!(d1 > d0);
    }
}
