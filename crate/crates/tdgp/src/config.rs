//! Experiment configuration: every module's settings in one TOML file.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tdgp_core::adversary::{DiscConfig, ModelConfig, TeacherConfig, TrainConfig};
use tdgp_core::camera::{CameraGenConfig, CameraPrior, ParamPrior};
use tdgp_core::depthsup::AdaptorConfig;
use tdgp_core::render::RenderConfig;
use tdgp_core::scene::SceneConfig;

use crate::error::{io_err, Error, Result};
use crate::synthetic::DataConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Depth maps averaged by the non-flatness score.
    pub nfs_maps: usize,
    pub nfs_bins: usize,
    pub nfs_res: usize,
    /// Prior draws for camera posterior statistics.
    pub camera_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { nfs_maps: 256, nfs_bins: 64, nfs_res: 32, camera_draws: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub steps: u64,
    pub log_every: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Camera prior matched to the synthetic data: wider than the ground-truth
/// spread in position, a range of fields of view, small look-at offsets.
pub fn desk_prior() -> CameraPrior {
    CameraPrior {
        outer_radius: 1.0,
        yaw: ParamPrior::uniform(-0.6, 0.6),
        pitch: ParamPrior::uniform(FRAC_PI_2 - 0.3, FRAC_PI_2 + 0.3),
        fov: ParamPrior::uniform(0.5, 0.9),
        lookat_yaw: ParamPrior::uniform(-std::f64::consts::PI, std::f64::consts::PI),
        lookat_pitch: ParamPrior::uniform(0.1, std::f64::consts::PI - 0.1),
        lookat_radius: ParamPrior::uniform(0.0, 0.05),
    }
}

/// Small networks sized for CPU minutes per run.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        scene: SceneConfig {
            z_dim: 16,
            n_classes: 2,
            w_dim: 32,
            mapping_width: 32,
            plane_channels: 8,
            plane_res: 16,
            synth_channels: 16,
            decoder_hidden: 32,
        },
        render: RenderConfig { n_steps: 16, ..RenderConfig::default() },
        prior: desk_prior(),
        camera: CameraGenConfig { hidden: 16, layers: 3 },
        adaptor: AdaptorConfig { filters: 8, kernel: 5 },
        disc: DiscConfig { channels: [8, 16, 16], feature_dim: 32 },
        teacher: TeacherConfig::default(),
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig { batch: 8, patch_res: 16, r1_interval: 4, ..TrainConfig::default() }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            // a prior that names its family is replaced whole
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !o.contains_key("family") => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 5000,
            log_every: 100,
            checkpoint_every: 0,
            model: desk_model(),
            train: desk_train(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Keys present in `text` override [`ExperimentConfig::default`], at any
    /// depth of nesting.
    pub fn from_toml(text: &str) -> Result<Self> {
        let bad = |e: toml::de::Error| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(bad)?;
        let mut base: toml::Table = toml::from_str(&Self::default().to_toml()).map_err(bad)?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.eval.nfs_bins < 2 || self.eval.nfs_maps == 0 || self.eval.nfs_res == 0 || self.eval.camera_draws < 2 {
            return Err(Error::Config("eval settings must be positive (at least two bins and draws)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
