use alloc::string::String;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{adv_losses, distill_loss, r1_penalty, LossWeights};
use super::{extract_patch, DiscConfig, Discriminator, RealDataset, TeacherConfig, TeacherExtractor};
use crate::camera::{
    build_view_tape, camera_gradient_penalty, emd_entropy_reg, CameraGenConfig, CameraGenerator, CameraMap,
    CameraPrior, FOV, N_PARAMS,
};
use crate::depthsup::{select_depth, AdaptorConfig, DepthAdaptor, DepthChoice, SelectionPolicy};
use crate::diffmath::{AdamConfig, AdamState, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::nn::Module;
use crate::render::{normalize_depth_tape, ray_dirs_tape, render_tape, DepthShift, PatchSpec, RenderConfig};
use crate::scene::{MappingNetwork, SceneConfig, SceneDecoder, SynthesisNetwork};
use crate::tensor::Tensor;

/// Architecture of every network plus rendering and the camera prior.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scene: SceneConfig,
    pub render: RenderConfig,
    pub prior: CameraPrior,
    pub camera: CameraGenConfig,
    pub adaptor: AdaptorConfig,
    pub disc: DiscConfig,
    pub teacher: TeacherConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.render.validate()?;
        self.prior.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraReg {
    None,
    GradPenalty,
    Emd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    /// Patch side length in pixels, for fakes and reals alike.
    pub patch_res: usize,
    /// Lower end of the uniform patch-scale distribution.
    pub min_patch_scale: f64,
    /// Probability of showing the raw normalized depth instead of an adapted map.
    pub p_raw: f64,
    /// When false the depth channel is zeroed for reals and fakes.
    pub depth_supervision: bool,
    pub camera_reg: CameraReg,
    pub emd_samples: usize,
    /// Multiplies the EMD term before the camera weights are applied.
    pub emd_scale: f64,
    pub weights: LossWeights,
    /// Apply R1 every this many steps, scaled by the interval.
    pub r1_interval: usize,
    pub adam: AdamConfig,
    /// Exponential moving average half-life, in images.
    pub ema_half_life: f64,
    /// Initial pre-sigmoid depth shift.
    pub shift_init: f64,
    /// Identity-regression steps for a fresh camera generator.
    pub camera_warmup: usize,
    /// Jitter sample positions inside each ray interval.
    pub stratified: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            patch_res: 32,
            min_patch_scale: 0.5,
            p_raw: 0.5,
            depth_supervision: true,
            camera_reg: CameraReg::GradPenalty,
            emd_samples: 64,
            emd_scale: 10.0,
            weights: LossWeights::default(),
            r1_interval: 1,
            adam: AdamConfig::default(),
            ema_half_life: 500.0,
            shift_init: -2.0,
            camera_warmup: 300,
            stratified: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        SelectionPolicy::new(self.p_raw)?;
        if self.batch == 0 || self.patch_res == 0 || self.r1_interval == 0 {
            return Err(invalid("batch, patch_res and r1_interval must be positive"));
        }
        if !(self.min_patch_scale > 0.0 && self.min_patch_scale <= 1.0) {
            return Err(invalid("min_patch_scale must be in (0, 1]"));
        }
        if !(self.emd_scale >= 0.0 && self.emd_scale.is_finite()) {
            return Err(invalid("emd_scale must be finite and nonnegative"));
        }
        if self.camera_reg == CameraReg::Emd && self.emd_samples < 2 {
            return Err(invalid("emd_samples must be at least 2"));
        }
        if !(self.ema_half_life >= 0.0) {
            return Err(invalid("ema_half_life must be nonnegative"));
        }
        Ok(())
    }
}

/// Scene generator, camera generator and depth adaptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator<C = CameraGenerator> {
    pub mapping: MappingNetwork,
    pub synthesis: SynthesisNetwork,
    pub decoder: SceneDecoder,
    pub shift: DepthShift,
    pub camera: C,
    pub adaptor: DepthAdaptor,
}

/// The generator's parameters bound on a tape, split per component.
#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub mapping: Vec<Var>,
    pub synthesis: Vec<Var>,
    pub decoder: Vec<Var>,
    pub beta: Var,
    pub camera: Vec<Var>,
    pub adaptor: Vec<Var>,
    pub all: Vec<Var>,
}

/// Fake discriminator inputs with the intermediate maps that produced them.
#[derive(Debug, Clone)]
pub struct FakeBatch {
    /// `[B, 4, h, w]`.
    pub x: Var,
    /// `[B, 1, h, w]` unnormalized rendered depth.
    pub depth: Var,
    /// `[B, 1, h, w]` normalized rendered depth.
    pub depth_norm: Var,
    /// `[B, 6]`.
    pub phi: Var,
    pub diag: Option<Var>,
    pub classes: Vec<usize>,
    pub psi: Vec<[f64; 3]>,
    pub choices: Vec<DepthChoice>,
    pub clamped_samples: usize,
}

impl<C: CameraMap> Generator<C> {
    pub fn new(rng: &mut impl Rng, model: &ModelConfig, shift_init: f64, camera: C) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            mapping: MappingNetwork::new(rng, &model.scene),
            synthesis: SynthesisNetwork::new(rng, &model.scene),
            decoder: SceneDecoder::new(rng, &model.scene),
            shift: DepthShift::new(&model.render, shift_init),
            camera,
            adaptor: DepthAdaptor::new(rng, &model.adaptor)?,
        })
    }

    pub fn bind_vars(&self, tape: &mut Tape, requires_grad: bool) -> GeneratorVars {
        let all = self.bind(tape, requires_grad);
        let mut it = all.iter().copied();
        let mut take = |n: usize| -> Vec<Var> { (&mut it).take(n).collect() };
        let mapping = take(self.mapping.params().len());
        let synthesis = take(self.synthesis.params().len());
        let decoder = take(4);
        let beta = take(1)[0];
        let camera = take(self.camera.params().len());
        let adaptor = take(self.adaptor.params().len());
        GeneratorVars { mapping, synthesis, decoder, beta, camera, adaptor, all }
    }

    /// Samples latents, classes, prior cameras and patches from `rng`, then
    /// renders and assembles fake RGB-D samples.
    #[allow(clippy::too_many_arguments)]
    pub fn fakes(
        &self,
        tape: &mut Tape,
        vars: &GeneratorVars,
        model: &ModelConfig,
        train: &TrainConfig,
        rng: &mut impl Rng,
        batch: usize,
        with_diag: bool,
    ) -> Result<FakeBatch> {
        let zd = self.mapping.z_dim();
        let res = train.patch_res;
        let z: Vec<f64> = (0..batch * zd).map(|_| math::std_normal(rng)).collect();
        let classes: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.mapping.n_classes)).collect();
        let phi_prime = model.prior.sample_batch(rng, batch);
        let patches: Vec<PatchSpec> = (0..batch).map(|_| PatchSpec::random(rng, train.min_patch_scale, res, res)).collect();
        let offsets = train
            .stratified
            .then(|| (0..batch * res * res * model.render.n_steps).map(|_| rng.random::<f64>()).collect());
        let policy = SelectionPolicy::new(train.p_raw)?;
        let choices: Vec<DepthChoice> = (0..batch).map(|_| policy.choose(rng)).collect();

        let zv = tape.constant(Tensor::new(&[batch, zd], z)?);
        let w = self.mapping.forward(tape, &vars.mapping, zv, &classes)?;
        let planes = self.synthesis.forward(tape, &vars.synthesis, w)?;
        let cam = self.camera.forward(tape, &vars.camera, &model.prior, &phi_prime, zv, &classes, with_diag)?;
        let view = build_view_tape(tape, cam.phi, model.prior.outer_radius)?;
        let fov_idx: Vec<usize> = (0..batch).map(|b| b * N_PARAMS + FOV).collect();
        let fov = tape.gather(cam.phi, &fov_idx)?;
        let dirs = ray_dirs_tape(tape, &view, fov, &patches)?;
        let (out, stats) = render_tape(tape, planes, &vars.decoder, view.origin, dirs, &model.render, offsets)?;

        let rgb = tape.slice(out, 1, 0, 3)?;
        let rgb = tape.reshape(rgb, &[batch, 3, res, res])?;
        let depth = tape.slice(out, 1, 3, 1)?;
        let depth = tape.reshape(depth, &[batch, 1, res, res])?;
        let b = self.shift.forward(tape, vars.beta);
        let depth_norm = normalize_depth_tape(tape, depth, b, model.render.t_near, model.render.t_far)?;
        let shown = if train.depth_supervision {
            let adapted = self.adaptor.forward(tape, &vars.adaptor, depth_norm)?;
            select_depth(tape, depth_norm, &adapted, &choices)?
        } else {
            tape.constant(Tensor::zeros(&[batch, 1, res, res]))
        };
        let x = tape.concat(1, &[rgb, shown])?;
        Ok(FakeBatch {
            x,
            depth,
            depth_norm,
            phi: cam.phi,
            diag: cam.diag,
            classes,
            psi: patches.iter().map(|p| p.psi()).collect(),
            choices,
            clamped_samples: stats.clamped_samples,
        })
    }
}

impl<C: CameraMap> Module for Generator<C> {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.mapping.params();
        p.extend(self.synthesis.params());
        p.extend(self.decoder.params());
        p.push(&self.shift.beta);
        p.extend(self.camera.params());
        p.extend(self.adaptor.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.mapping.params_mut();
        p.extend(self.synthesis.params_mut());
        p.extend(self.decoder.params_mut());
        p.push(&mut self.shift.beta);
        p.extend(self.camera.params_mut());
        p.extend(self.adaptor.params_mut());
        p
    }
    fn param_names(&self) -> Vec<String> {
        let mut n = self.mapping.param_names();
        n.extend(self.synthesis.param_names());
        n.extend(self.decoder.param_names());
        n.push(String::from("shift.beta"));
        n.extend(self.camera.param_names());
        n.extend(self.adaptor.param_names());
        n
    }
}

/// Every reported quantity of one training step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_adv: f64,
    pub dist: f64,
    pub r1: f64,
    /// `d_adv + lambda_dist dist + lambda_r k r1` (k is the lazy interval when
    /// R1 ran this step, otherwise r1 is zero).
    pub d_total: f64,
    pub g_adv: f64,
    pub camera: [f64; N_PARAMS],
    pub g_total: f64,
    pub real_score: f64,
    pub fake_score: f64,
    /// Counts of `[raw, adapted 1, adapted 2, adapted 3]` in the generator step.
    pub selection: [usize; 4],
    pub camera_collapsed: bool,
    pub clamped_samples: usize,
    pub shift: f64,
}

/// All mutable training state: parameters, moments, EMA weights, RNG.
#[derive(Debug, Clone)]
pub struct TrainState<C = CameraGenerator> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub g: Generator<C>,
    /// Moving average of the generator parameters, parallel to `g.params()`.
    pub ema: Vec<Tensor>,
    pub d: Discriminator,
    pub teacher: TeacherExtractor,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainState<CameraGenerator> {
    /// Fresh state with the default camera generator, warmed up towards the
    /// identity map.
    pub fn new(model: ModelConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        let warmup = train.camera_warmup;
        let batch = 64;
        Self::with_camera(model, train, seed, |rng, m| {
            let mut c = CameraGenerator::new(rng, &m.camera, m.scene.z_dim, m.scene.n_classes);
            c.fit_identity(&m.prior, rng, warmup, batch)?;
            Ok(c)
        })
    }
}

fn column_mean(t: &[f64]) -> f64 {
    if t.is_empty() {
        0.0
    } else {
        t.iter().sum::<f64>() / t.len() as f64
    }
}

fn check(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term: String::from(term), value: v })
    }
}

impl<C: CameraMap + Clone> TrainState<C> {
    pub fn with_camera(
        model: ModelConfig,
        train: TrainConfig,
        seed: u64,
        camera: impl FnOnce(&mut ChaCha8Rng, &ModelConfig) -> Result<C>,
    ) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cam = camera(&mut rng, &model)?;
        let g = Generator::new(&mut rng, &model, train.shift_init, cam)?;
        let teacher = TeacherExtractor::new(&model.teacher);
        let res = (train.patch_res, train.patch_res);
        let d = Discriminator::new(&mut rng, &model.disc, res, model.scene.n_classes, teacher.dim());
        let ema = g.params().into_iter().cloned().collect();
        let adam_g = AdamState::new(train.adam, &g.params());
        let adam_d = AdamState::new(train.adam, &d.params());
        Ok(Self { model, train, g, ema, d, teacher, adam_g, adam_d, rng, step: 0 })
    }

    /// Copy of the generator carrying the moving-average weights.
    pub fn ema_generator(&self) -> Generator<C> {
        let mut g = self.g.clone();
        for (dst, src) in g.params_mut().into_iter().zip(&self.ema) {
            *dst = src.clone();
        }
        g
    }

    /// Real batch `[B, 4, h, w]` with classes, patch triples and teacher
    /// features.
    fn real_batch(&mut self, data: &RealDataset) -> Result<(Tensor, Vec<usize>, Vec<[f64; 3]>, Tensor)> {
        let (b, res) = (self.train.batch, self.train.patch_res);
        let n = res * res;
        let mut x = Vec::with_capacity(b * 4 * n);
        let mut classes = Vec::with_capacity(b);
        let mut psi = Vec::with_capacity(b);
        let mut pre = Vec::new();
        for _ in 0..b {
            let im = &data.images[self.rng.random_range(0..data.len())];
            let patch = PatchSpec::random(&mut self.rng, self.train.min_patch_scale, res, res);
            let mut p = extract_patch(im, &patch)?;
            if !self.train.depth_supervision {
                p[3 * n..].iter_mut().for_each(|v| *v = 0.0);
            }
            x.extend(p);
            classes.push(im.class);
            psi.push(patch.psi());
            if let Some(f) = &im.features {
                pre.extend_from_slice(f);
            }
        }
        let x = Tensor::new(&[b, 4, res, res], x)?;
        let e = if pre.is_empty() {
            let rgb: Vec<f64> = x.data().chunks(4 * n).flat_map(|s| s[..3 * n].iter().copied()).collect();
            self.teacher.extract(&Tensor::new(&[b, 3, res, res], rgb)?)?
        } else {
            let dim = pre.len() / b;
            Tensor::new(&[b, dim], pre)?
        };
        Ok((x, classes, psi, e))
    }

    /// Discriminator update only; returns `(d_adv, dist, r1, d_total, real, fake)`.
    fn d_step(&mut self, data: &RealDataset) -> Result<[f64; 6]> {
        let (x_real, classes, psi, e) = self.real_batch(data)?;
        let w = self.train.weights.clone();
        let b = self.train.batch;
        let mut tape = Tape::new();
        let gv = self.g.bind_vars(&mut tape, false);
        let fakes = self.g.fakes(&mut tape, &gv, &self.model, &self.train, &mut self.rng, b, false)?;
        let fake_x = tape.detach(fakes.x);
        let dv = self.d.bind(&mut tape, true);
        let xr = tape.constant(x_real.clone());
        let (s_real, e_hat) = self.d.forward(&mut tape, &dv, xr, &classes, &psi)?;
        let (s_fake, _) = self.d.forward(&mut tape, &dv, fake_x, &fakes.classes, &fakes.psi)?;
        let (_, l_adv) = adv_losses(&mut tape, s_real, s_fake)?;
        let ev = tape.constant(e);
        let l_dist = distill_loss(&mut tape, ev, e_hat)?;
        let wd = tape.scale(l_dist, w.dist);
        let obj = tape.add(l_adv, wd)?;
        let adv = check("d_adv", tape.value(l_adv).item())?;
        let dist = check("dist", tape.value(l_dist).item())?;
        let grads = tape.backward(obj)?;
        let mut g = tape.grad_tensors(&grads, &dv);

        let k = self.train.r1_interval;
        let mut r1 = 0.0;
        if self.step.is_multiple_of(k as u64) && w.r1 > 0.0 {
            let pen = r1_penalty(&self.d, &x_real, &classes, &psi)?;
            r1 = check("r1", pen.value)?;
            let scale = w.r1 * k as f64;
            for (dst, src) in g.iter_mut().zip(&pen.grads) {
                for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
                    *a += scale * b;
                }
            }
        }
        let total = adv + w.dist * dist + w.r1 * k as f64 * r1;
        check("d_total", total)?;
        let (real, fake) = (column_mean(tape.data(s_real)), column_mean(tape.data(s_fake)));
        self.adam_d.step(&mut self.d.params_mut(), &g)?;
        Ok([adv, dist, r1, total, real, fake])
    }

    fn g_step(&mut self, m: &mut StepMetrics) -> Result<()> {
        let b = self.train.batch;
        let reg = self.train.camera_reg;
        let mut tape = Tape::new();
        let gv = self.g.bind_vars(&mut tape, true);
        let fakes = self.g.fakes(&mut tape, &gv, &self.model, &self.train, &mut self.rng, b, reg == CameraReg::GradPenalty)?;
        let dv = self.d.bind(&mut tape, false);
        let (s_fake, _) = self.d.forward(&mut tape, &dv, fakes.x, &fakes.classes, &fakes.psi)?;
        let nf = tape.neg(s_fake);
        let terms = tape.softplus(nf);
        let l_adv = tape.mean(terms);

        let per = match reg {
            CameraReg::None => None,
            CameraReg::GradPenalty => {
                let diag = fakes.diag.ok_or_else(|| invalid("camera map did not return derivatives"))?;
                let p = camera_gradient_penalty(&mut tape, diag)?;
                m.camera_collapsed = p.collapsed;
                Some(p.per_param)
            }
            CameraReg::Emd => {
                let n = self.train.emd_samples;
                let zd = self.g.mapping.z_dim();
                let z: Vec<f64> = (0..n * zd).map(|_| math::std_normal(&mut self.rng)).collect();
                let classes: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..self.model.scene.n_classes)).collect();
                let pp = self.model.prior.sample_batch(&mut self.rng, n);
                let zv = tape.constant(Tensor::new(&[n, zd], z)?);
                let out = self.g.camera.forward(&mut tape, &gv.camera, &self.model.prior, &pp, zv, &classes, false)?;
                let e = emd_entropy_reg(&mut tape, out.phi, &self.model.prior)?;
                Some(tape.scale(e, self.train.emd_scale))
            }
        };
        let obj = match per {
            Some(p) => {
                let wv = tape.constant(Tensor::from_vec(self.train.weights.camera().to_vec()));
                let wp = tape.mul(p, wv)?;
                let s = tape.sum(wp);
                m.camera.copy_from_slice(tape.data(p));
                tape.add(l_adv, s)?
            }
            None => l_adv,
        };
        m.g_adv = check("g_adv", tape.value(l_adv).item())?;
        for (i, v) in m.camera.iter().enumerate() {
            check(crate::camera::PARAM_NAMES[i], *v)?;
        }
        m.g_total = check("g_total", super::generator_loss(&super::GeneratorLossParts { adv: m.g_adv, camera: m.camera }, &self.train.weights))?;
        let grads = tape.backward(obj)?;
        let g = tape.grad_tensors(&grads, &gv.all);
        for c in &fakes.choices {
            m.selection[c.index()] += 1;
        }
        m.clamped_samples = fakes.clamped_samples;
        self.adam_g.step(&mut self.g.params_mut(), &g)?;
        self.update_ema();
        m.shift = self.g.shift.value();
        Ok(())
    }

    fn update_ema(&mut self) {
        let hl = self.train.ema_half_life;
        let beta = if hl > 0.0 { libm::pow(0.5, self.train.batch as f64 / hl) } else { 0.0 };
        for (e, p) in self.ema.iter_mut().zip(self.g.params()) {
            for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
                *a = beta * *a + (1.0 - beta) * b;
            }
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, data: &RealDataset) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(invalid("training needs at least one real image"));
        }
        let [d_adv, dist, r1, d_total, real_score, fake_score] = self.d_step(data)?;
        let mut m = StepMetrics { step: self.step, d_adv, dist, r1, d_total, real_score, fake_score, ..StepMetrics::default() };
        self.g_step(&mut m)?;
        self.step += 1;
        Ok(m)
    }

    /// Discriminator updates only (generator frozen).
    pub fn train_step_d_only(&mut self, data: &RealDataset) -> Result<StepMetrics> {
        let [d_adv, dist, r1, d_total, real_score, fake_score] = self.d_step(data)?;
        let m = StepMetrics { step: self.step, d_adv, dist, r1, d_total, real_score, fake_score, ..StepMetrics::default() };
        self.step += 1;
        Ok(m)
    }
}
