//! Training runs, evaluation, and the two ablations.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdgp_core::adversary::{CameraReg, Generator, ModelConfig, RealDataset, StepMetrics, TrainState};
use tdgp_core::camera::{build_view, CameraGenerator, CameraMap, CameraOutput, CameraParams, CameraPrior, SoftplusMlp, N_PARAMS};
use tdgp_core::diffmath::{Tape, Var};
use tdgp_core::evalkit::generator_nfs;
use tdgp_core::render::{gen_rays, volume_render, PatchSpec, TriPlaneField};
use tdgp_core::math::std_normal;
use tdgp_core::nn::{one_hot, Module};
use tdgp_core::Tensor;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Baseline camera map `phi = clamp(phi' + (M - m) * delta(phi', z, c))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCamera {
    pub mlp: SoftplusMlp,
    pub z_dim: usize,
    pub n_classes: usize,
}

impl ResidualCamera {
    pub fn new(rng: &mut ChaCha8Rng, m: &ModelConfig) -> tdgp_core::Result<Self> {
        let (z_dim, n_classes) = (m.scene.z_dim, m.scene.n_classes);
        let mut dims = vec![N_PARAMS + z_dim + n_classes];
        dims.extend(std::iter::repeat_n(m.camera.hidden, m.camera.layers.max(1) - 1));
        dims.push(N_PARAMS);
        Ok(Self { mlp: SoftplusMlp::new(rng, &dims, 0.1), z_dim, n_classes })
    }
}

impl Module for ResidualCamera {
    fn params(&self) -> Vec<&Tensor> {
        self.mlp.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
    fn param_names(&self) -> Vec<String> {
        (0..self.mlp.layers.len()).flat_map(|i| [format!("residual.{i}.weight"), format!("residual.{i}.bias")]).collect()
    }
}

impl CameraMap for ResidualCamera {
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        prior: &CameraPrior,
        phi_prime: &[CameraParams],
        z: Var,
        classes: &[usize],
        with_diag: bool,
    ) -> tdgp_core::Result<CameraOutput> {
        if with_diag {
            return Err(tdgp_core::Error::Invalid("the residual camera has no gradient penalty".into()));
        }
        let b = phi_prime.len();
        let norm: Vec<f64> = phi_prime.iter().flat_map(|p| prior.normalize(p)).collect();
        let raw: Vec<f64> = phi_prime.iter().flat_map(|p| p.0).collect();
        let xn = tape.constant(Tensor::new(&[b, N_PARAMS], norm)?);
        let oh = one_hot(tape, classes, self.n_classes);
        let x = tape.concat(1, &[xn, z, oh])?;
        let (delta, _) = self.mlp.forward_tangents(tape, vars, x, &[])?;
        let (mins, maxs) = (prior.mins(), prior.maxs());
        let ranges: Vec<f64> = (0..b).flat_map(|_| (0..N_PARAMS).map(|i| maxs[i] - mins[i])).collect();
        let rv = tape.constant(Tensor::new(&[b, N_PARAMS], ranges)?);
        let scaled = tape.mul(delta, rv)?;
        let base = tape.constant(Tensor::new(&[b, N_PARAMS], raw)?);
        let moved = tape.add(base, scaled)?;
        // clamp per column into the prior box
        let mut cols = Vec::with_capacity(N_PARAMS);
        for i in 0..N_PARAMS {
            let c = tape.slice(moved, 1, i, 1)?;
            cols.push(tape.clamp(c, mins[i], maxs[i]));
        }
        let phi = tape.concat(1, &cols)?;
        Ok(CameraOutput { phi, diag: None })
    }
}

/// Camera regularization variants compared by the camera ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CameraVariant {
    #[value(name = "none")]
    NoReg,
    Residual,
    #[value(name = "gradpen")]
    GradPenalty,
    Emd,
}

impl CameraVariant {
    pub const ALL: [CameraVariant; 4] = [Self::NoReg, Self::Residual, Self::GradPenalty, Self::Emd];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoReg => "none",
            Self::Residual => "residual",
            Self::GradPenalty => "gradpen",
            Self::Emd => "emd",
        }
    }

    pub fn reg(self) -> CameraReg {
        match self {
            Self::NoReg | Self::Residual => CameraReg::None,
            Self::GradPenalty => CameraReg::GradPenalty,
            Self::Emd => CameraReg::Emd,
        }
    }
}

/// Either camera map behind one training interface.
#[derive(Debug, Clone)]
pub enum AnyState {
    Standard(TrainState<CameraGenerator>),
    Residual(TrainState<ResidualCamera>),
}

impl AnyState {
    pub fn new(cfg: &ExperimentConfig, variant: CameraVariant) -> Result<Self> {
        let mut train = cfg.train.clone();
        train.camera_reg = variant.reg();
        Ok(match variant {
            CameraVariant::Residual => Self::Residual(TrainState::with_camera(cfg.model.clone(), train, cfg.seed, ResidualCamera::new)?),
            _ => Self::Standard(TrainState::new(cfg.model.clone(), train, cfg.seed)?),
        })
    }

    pub fn load(path: &Path, variant: CameraVariant) -> Result<Self> {
        Ok(match variant {
            CameraVariant::Residual => Self::Residual(checkpoint::load_with(path, ResidualCamera::new)?),
            _ => Self::Standard(checkpoint::load(path)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Self::Standard(s) => checkpoint::save(s, path),
            Self::Residual(s) => checkpoint::save(s, path),
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            Self::Standard(s) => s.step,
            Self::Residual(s) => s.step,
        }
    }

    pub fn train_step(&mut self, data: &RealDataset) -> Result<StepMetrics> {
        Ok(match self {
            Self::Standard(s) => s.train_step(data)?,
            Self::Residual(s) => s.train_step(data)?,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Self::Standard(s) => checkpoint::encode(s),
            Self::Residual(s) => checkpoint::encode(s),
        }
    }
}

/// Trains until `state.step() == until`, calling `log` on every metric.
pub fn train_until(state: &mut AnyState, data: &RealDataset, until: u64, mut log: impl FnMut(&StepMetrics)) -> Result<Option<StepMetrics>> {
    let mut last = None;
    while state.step() < until {
        let m = state.train_step(data)?;
        log(&m);
        last = Some(m);
    }
    Ok(last)
}

/// NFS of the moving-average generator over frontal renders.
pub fn eval_nfs<C: CameraMap + Clone>(state: &TrainState<C>, cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    let g = state.ema_generator();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(generator_nfs(&g, &state.model.render, &state.model.prior, cfg.eval.nfs_res, cfg.eval.nfs_maps, cfg.eval.nfs_bins, &mut rng)?)
}

pub fn any_eval_nfs(state: &AnyState, cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    match state {
        AnyState::Standard(s) => eval_nfs(s, cfg, seed),
        AnyState::Residual(s) => eval_nfs(s, cfg, seed),
    }
}

/// Per-parameter standard deviations of prior draws and of their images
/// under the camera map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpread {
    pub prior_std: [f64; N_PARAMS],
    pub posterior_std: [f64; N_PARAMS],
}

impl CameraSpread {
    /// `posterior / prior`, or NaN for a degenerate prior parameter.
    pub fn ratio(&self) -> [f64; N_PARAMS] {
        std::array::from_fn(|i| if self.prior_std[i] > 0.0 { self.posterior_std[i] / self.prior_std[i] } else { f64::NAN })
    }
}

fn column_std(rows: &[CameraParams], i: usize) -> f64 {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.0[i]).sum::<f64>() / n;
    (rows.iter().map(|r| (r.0[i] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn camera_spread<C: CameraMap>(g: &Generator<C>, prior: &CameraPrior, draws: usize, seed: u64) -> Result<CameraSpread> {
    if draws < 2 {
        return Err(Error::Config("camera statistics need at least two draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zd = g.mapping.z_dim();
    let pp = prior.sample_batch(&mut rng, draws);
    let z: Vec<f64> = (0..draws * zd).map(|_| std_normal(&mut rng)).collect();
    let classes: Vec<usize> = (0..draws).map(|i| i % g.mapping.n_classes).collect();
    let post = g.camera.generate(prior, &pp, &Tensor::new(&[draws, zd], z)?, &classes)?;
    Ok(CameraSpread {
        prior_std: std::array::from_fn(|i| column_std(&pp, i)),
        posterior_std: std::array::from_fn(|i| column_std(&post, i)),
    })
}

pub fn any_camera_spread(state: &AnyState, draws: usize, seed: u64) -> Result<CameraSpread> {
    match state {
        AnyState::Standard(s) => camera_spread(&s.ema_generator(), &s.model.prior, draws, seed),
        AnyState::Residual(s) => camera_spread(&s.ema_generator(), &s.model.prior, draws, seed),
    }
}

/// A depth-supervision variant: `Some(p)` shows raw depth with probability
/// `p`; `None` drops the depth channel entirely.
pub type DepthVariant = Option<f64>;

pub const DEPTH_VARIANTS: [DepthVariant; 5] = [Some(0.0), Some(0.25), Some(0.5), Some(1.0), None];

pub fn depth_variant_name(v: DepthVariant) -> String {
    match v {
        Some(p) => format!("p{p}"),
        None => "no_depth".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub variant: String,
    pub p_raw: Option<f64>,
    pub seed: u64,
    pub nfs: f64,
    pub final_d_adv: f64,
    pub final_g_adv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRow {
    pub variant: String,
    pub seed: u64,
    pub prior_std: [f64; N_PARAMS],
    pub posterior_std: [f64; N_PARAMS],
    pub ratio: [f64; N_PARAMS],
}

/// Evaluation streams are derived from the run seed but kept apart from
/// training randomness.
fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_e7a1
}

pub fn run_depth_variant(cfg: &ExperimentConfig, data: &RealDataset, v: DepthVariant, seed: u64, mut log: impl FnMut(&StepMetrics)) -> Result<DepthRow> {
    let mut c = cfg.clone();
    c.seed = seed;
    match v {
        Some(p) => c.train.p_raw = p,
        None => c.train.depth_supervision = false,
    }
    let mut state = AnyState::new(&c, CameraVariant::GradPenalty)?;
    let last = train_until(&mut state, data, c.steps, &mut log)?.unwrap_or_default();
    Ok(DepthRow {
        variant: depth_variant_name(v),
        p_raw: v,
        seed,
        nfs: any_eval_nfs(&state, &c, eval_seed(seed))?,
        final_d_adv: last.d_adv,
        final_g_adv: last.g_adv,
    })
}

pub fn run_camera_variant(cfg: &ExperimentConfig, data: &RealDataset, v: CameraVariant, seed: u64, mut log: impl FnMut(&StepMetrics)) -> Result<CameraRow> {
    let mut c = cfg.clone();
    c.seed = seed;
    let mut state = AnyState::new(&c, v)?;
    train_until(&mut state, data, c.steps, &mut log)?;
    let s = any_camera_spread(&state, c.eval.camera_draws, eval_seed(seed))?;
    Ok(CameraRow { variant: v.name().into(), seed, prior_std: s.prior_std, posterior_std: s.posterior_std, ratio: s.ratio() })
}

/// Median of finite values (mean of the middle pair for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// One generated image: RGB `[3, res, res]` in `[0, 1]` and depth with
/// unhit rays at the far bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub res: usize,
    pub camera: CameraParams,
}

/// Renders latent `z ~ N(0, I)` of `class` through the camera map applied to
/// the prior's frontal camera.
pub fn render_sample<C: CameraMap>(g: &Generator<C>, model: &ModelConfig, res: usize, class: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if class >= g.mapping.n_classes {
        return Err(Error::Config(format!("class {class} out of range for {} classes", g.mapping.n_classes)));
    }
    let zd = g.mapping.z_dim();
    let z: Vec<f64> = (0..zd).map(|_| std_normal(rng)).collect();
    let phi = g.camera.generate(&model.prior, &[model.prior.frontal()], &Tensor::new(&[1, zd], z.clone())?, &[class])?[0];
    let planes = g.synthesis.synthesize(&g.mapping.map(&z, class)?)?;
    let view = build_view(&phi, model.prior.outer_radius)?;
    let rays = gen_rays(&view, phi.fov(), &PatchSpec::full(res, res), &model.render)?;
    let out = volume_render(&TriPlaneField::new(&planes, &g.decoder, &model.render), &rays, &model.render)?;
    let depth = out.depth.iter().zip(&out.weight).map(|(d, w)| d + (1.0 - w) * model.render.t_far).collect();
    Ok(Sample { rgb: out.rgb, depth, res, camera: phi })
}
