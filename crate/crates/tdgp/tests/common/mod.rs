#![allow(dead_code)]

use std::path::Path;

use tdgp::config::{EvalConfig, ExperimentConfig};
use tdgp::synthetic::DataConfig;
use tdgp_core::adversary::{DiscConfig, ModelConfig, TeacherConfig, TrainConfig};
use tdgp_core::camera::CameraGenConfig;
use tdgp_core::depthsup::AdaptorConfig;
use tdgp_core::render::RenderConfig;
use tdgp_core::scene::SceneConfig;

/// Seconds-scale experiment: tiny networks, a handful of 8x8 scenes.
pub fn tiny() -> ExperimentConfig {
    let base = ExperimentConfig::default();
    ExperimentConfig {
        seed: 3,
        steps: 20,
        log_every: 5,
        checkpoint_every: 0,
        model: ModelConfig {
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
            ..base.model
        },
        train: TrainConfig { batch: 3, patch_res: 6, camera_warmup: 20, emd_samples: 8, r1_interval: 2, ..TrainConfig::default() },
        data: DataConfig { n_scenes: 6, res: 8, render_steps: 32, ..DataConfig::default() },
        eval: EvalConfig { nfs_maps: 4, nfs_bins: 16, nfs_res: 6, camera_draws: 32 },
    }
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) {
    std::fs::write(path, cfg.to_toml()).unwrap();
}

pub fn make_dataset(cfg: &ExperimentConfig, dir: &Path) {
    tdgp::dataset::generate(dir, &cfg.data, &cfg.model.render, cfg.seed, &cfg.hash(), false).unwrap();
}
