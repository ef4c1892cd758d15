//! Procedural scenes with analytic density, rendered as the real dataset.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tdgp_core::camera::{build_view, CameraParams, CameraPrior, ParamPrior, PriorFamily, FOV};
use tdgp_core::depthsup::CorruptionConfig;
use tdgp_core::render::{gen_rays, volume_render, PatchSpec, RadianceField, RenderConfig};
use tdgp_core::scene::Decoded;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    Box,
}

impl Shape {
    pub fn class(self) -> usize {
        match self {
            Shape::Sphere => 0,
            Shape::Box => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Radius (sphere, first component) or half extents (box).
    pub size: [f64; 3],
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn sphere(center: [f64; 3], radius: f64, albedo: [f64; 3]) -> Self {
        Self { shape: Shape::Sphere, center, size: [radius; 3], albedo }
    }

    pub fn cuboid(center: [f64; 3], half: [f64; 3], albedo: [f64; 3]) -> Self {
        Self { shape: Shape::Box, center, size: half, albedo }
    }

    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.local(p);
        match self.shape {
            Shape::Sphere => q.iter().map(|v| v * v).sum::<f64>() <= self.size[0] * self.size[0],
            Shape::Box => (0..3).all(|i| q[i].abs() <= self.size[i]),
        }
    }

    /// Outward unit normal of the nearest surface.
    pub fn normal(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.local(p);
        match self.shape {
            Shape::Sphere => {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                q.map(|v| v / n)
            }
            Shape::Box => {
                let k = (0..3).max_by(|&a, &b| (q[a].abs() / self.size[a]).total_cmp(&(q[b].abs() / self.size[b]))).unwrap();
                let mut n = [0.0; 3];
                n[k] = q[k].signum();
                n
            }
        }
    }

    pub fn inside_unit_cube(&self) -> bool {
        (0..3).all(|i| self.center[i].abs() + self.size[i] <= 0.5 + 1e-12)
    }
}

/// Constant density inside any primitive, zero outside; Lambertian color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub density: f64,
    /// Unit direction towards the light.
    pub light: [f64; 3],
    pub ambient: f64,
}

impl RadianceField for SyntheticScene {
    fn query(&self, xyz: [f64; 3]) -> Decoded {
        match self.primitives.iter().find(|p| p.contains(xyz)) {
            None => Decoded { rgb: [0.0; 3], sigma: 0.0 },
            Some(p) => {
                let n = p.normal(xyz);
                let lambert = (n[0] * self.light[0] + n[1] * self.light[1] + n[2] * self.light[2]).max(0.0);
                let shade = self.ambient + (1.0 - self.ambient) * lambert;
                Decoded { rgb: p.albedo.map(|a| a * shade), sigma: self.density }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub res: usize,
    /// Quadrature steps for ground-truth renders.
    pub render_steps: usize,
    pub density: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Maximum offset of the object center from the origin, per axis.
    pub jitter: f64,
    /// x coordinate of the backdrop's front face.
    pub backdrop_x: f64,
    pub backdrop_albedo: [f64; 3],
    /// Ground-truth camera distribution; recorded with the dataset, never
    /// used by training.
    pub cameras: CameraPrior,
    pub corruption: CorruptionConfig,
}

/// Ground-truth cameras: frontal yaw and pitch with modest spread, fixed field
/// of view, looking at the origin.
pub fn gt_cameras() -> CameraPrior {
    let tg = |mean: f64, std: f64, half: f64| ParamPrior { min: mean - half, max: mean + half, family: PriorFamily::TruncatedGaussian { mean, std } };
    CameraPrior {
        outer_radius: 1.0,
        yaw: tg(0.0, 0.25, 0.6),
        pitch: tg(FRAC_PI_2, 0.12, 0.3),
        fov: ParamPrior::uniform(0.7, 0.7),
        lookat_yaw: ParamPrior::uniform(0.0, 0.0),
        lookat_pitch: ParamPrior::uniform(FRAC_PI_2, FRAC_PI_2),
        lookat_radius: ParamPrior::uniform(0.0, 0.0),
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_scenes: 512,
            res: 32,
            render_steps: 128,
            density: 400.0,
            radius_min: 0.08,
            radius_max: 0.14,
            jitter: 0.02,
            backdrop_x: -0.2,
            backdrop_albedo: [0.95, 0.95, 0.95],
            cameras: gt_cameras(),
            corruption: CorruptionConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_scenes == 0 || self.res == 0 || self.render_steps < 2 {
            return bad("n_scenes, res and render_steps must be positive");
        }
        if !(self.density > 0.0) || !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad("density and radii must be positive with radius_min <= radius_max");
        }
        if self.radius_max + self.jitter >= -self.backdrop_x || self.backdrop_x <= -0.5 {
            return bad("objects must fit in front of the backdrop, inside the unit cube");
        }
        self.corruption.validate()?;
        Ok(())
    }
}

/// Render settings for ground truth: the model's depth range, more steps.
pub fn gt_render_config(data: &DataConfig, render: &RenderConfig) -> RenderConfig {
    RenderConfig { n_steps: data.render_steps, ..render.clone() }
}

/// One random object (class = shape) in front of the backdrop.
pub fn random_scene(cfg: &DataConfig, rng: &mut impl Rng) -> SyntheticScene {
    let shape = if rng.random::<bool>() { Shape::Box } else { Shape::Sphere };
    let j = cfg.jitter;
    let center = [rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j)];
    let albedo = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
    let object = match shape {
        Shape::Sphere => Primitive::sphere(center, rng.random_range(cfg.radius_min..=cfg.radius_max), albedo),
        Shape::Box => {
            let mut half = [0.0; 3];
            for h in half.iter_mut() {
                *h = rng.random_range(cfg.radius_min..=cfg.radius_max) / 3f64.sqrt() * 1.3;
            }
            Primitive::cuboid(center, half, albedo)
        }
    };
    let back = 0.5 - 1e-3;
    let bx = 0.5 * (cfg.backdrop_x - back);
    let backdrop = Primitive::cuboid([bx, 0.0, 0.0], [0.5 * (cfg.backdrop_x + back), back, back], cfg.backdrop_albedo);
    let l: [f64; 3] = [0.6, 0.4, 0.7];
    let n = l.iter().map(|v| v * v).sum::<f64>().sqrt();
    SyntheticScene { primitives: vec![object, backdrop], density: cfg.density, light: l.map(|v| v / n), ambient: 0.35 }
}

/// Color `[3, h, w]` and depth `[h, w]`; transmittance left at the far bound
/// counts as far depth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

pub fn render_scene(scene: &impl RadianceField, phi: &CameraParams, outer_radius: f64, patch: &PatchSpec, render: &RenderConfig) -> Result<GroundTruth> {
    let view = build_view(phi, outer_radius)?;
    let rays = gen_rays(&view, phi.0[FOV], patch, render)?;
    let out = volume_render(scene, &rays, render)?;
    let depth = out.depth.iter().zip(&out.weight).map(|(d, w)| d + (1.0 - w) * render.t_far).collect();
    Ok(GroundTruth { rgb: out.rgb, depth, h: out.h, w: out.w })
}
