//! On-disk synthetic dataset: generation and the training loader.
//!
//! Layout: `images/NNNNN.ppm`, `depth/NNNNN.depth` (true),
//! `estimated/NNNNN.depth` (corrupted, unnormalized), `labels.txt`,
//! `gt_cameras.txt`, `dataset.toml` and optionally `features.txt` with one
//! whitespace-separated teacher feature vector per image.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdgp_core::adversary::{RealDataset, RealImage};
use tdgp_core::camera::CameraParams;
use tdgp_core::depthsup::{normalize_real_depth, simulate_estimated_depth};
use tdgp_core::render::{PatchSpec, RenderConfig};

use crate::error::{format_err, io_err, Error, Result};
use crate::formats::{read_depth, read_ppm, write_depth, write_ppm};
use crate::synthetic::{gt_render_config, random_scene, render_scene, DataConfig};

pub const N_CLASSES: usize = 2;
pub const GT_CAMERAS_FILE: &str = "gt_cameras.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub config_hash: String,
    pub data: DataConfig,
    pub render: RenderConfig,
}

fn image_name(i: usize) -> String {
    format!("{i:05}")
}

fn ensure_empty_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::NotEmpty(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    for sub in ["", "images", "depth", "estimated"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Scene `i` draws from its own stream of the seed, so scenes are independent
/// of generation order.
pub fn scene_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64 + 1);
    r
}

/// Runs `job(0..n)` on all available cores, keeping index order.
fn render_all<T: Send>(n: usize, job: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = std::thread::available_parallelism().map_or(1, |t| t.get()).min(n.max(1));
    let chunk = n.div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| {
                let job = &job;
                s.spawn(move || (lo..(lo + chunk).min(n)).map(job).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scene worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Renders `data.n_scenes` scenes into `dir`.
pub fn generate(dir: &Path, data: &DataConfig, render: &RenderConfig, seed: u64, config_hash: &str, overwrite: bool) -> Result<()> {
    data.validate()?;
    render.validate()?;
    ensure_empty_dir(dir, overwrite)?;
    let gt = gt_render_config(data, render);
    let patch = PatchSpec::full(data.res, data.res);
    let scenes = render_all(data.n_scenes, |i| {
        let mut rng = scene_rng(seed, i);
        let scene = random_scene(data, &mut rng);
        let phi = data.cameras.sample(&mut rng);
        let out = render_scene(&scene, &phi, data.cameras.outer_radius, &patch, &gt)?;
        let est = simulate_estimated_depth(&out.depth, out.h, out.w, &data.corruption, &mut rng)?;
        Ok((scene.primitives[0].shape.class(), phi, out, est))
    })?;
    let mut labels = String::new();
    let mut cams = String::new();
    for (i, (class, phi, out, est)) in scenes.into_iter().enumerate() {
        let name = image_name(i);
        write_ppm(&dir.join("images").join(format!("{name}.ppm")), &out.rgb, out.h, out.w)?;
        write_depth(&dir.join("depth").join(format!("{name}.depth")), &out.depth, out.h, out.w)?;
        write_depth(&dir.join("estimated").join(format!("{name}.depth")), &est, out.h, out.w)?;
        let _ = writeln!(labels, "{name} {class}");
        let CameraParams(p) = phi;
        let _ = writeln!(cams, "{name} {} {} {} {} {} {}", p[0], p[1], p[2], p[3], p[4], p[5]);
    }
    let write = |name: &str, text: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write("labels.txt", &labels)?;
    write(GT_CAMERAS_FILE, &cams)?;
    let meta = DatasetMeta { seed, config_hash: config_hash.into(), data: data.clone(), render: render.clone() };
    write("dataset.toml", &toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?)
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(io_err(p))
}

/// Loads images, estimated depth (normalized per image into `[-1, 1]`),
/// labels and optional precomputed features.
pub fn load(dir: &Path) -> Result<RealDataset> {
    let labels_path = dir.join("labels.txt");
    let features_path = dir.join("features.txt");
    let features: Option<Vec<Vec<f64>>> = if features_path.exists() {
        let text = read_text(&features_path)?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_whitespace().map(|t| t.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format_err(&features_path, e.to_string()))?;
        Some(rows)
    } else {
        None
    };
    let mut images = Vec::new();
    for (k, line) in read_text(&labels_path)?.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let mut it = line.split_whitespace();
        let (Some(name), Some(class)) = (it.next(), it.next().and_then(|c| c.parse::<usize>().ok())) else {
            return Err(format_err(&labels_path, format!("bad line {}", k + 1)));
        };
        let img: PathBuf = dir.join("images").join(format!("{name}.ppm"));
        let (rgb, h, w) = read_ppm(&img)?;
        let dp = dir.join("estimated").join(format!("{name}.depth"));
        let (depth, dh, dw) = read_depth(&dp)?;
        if (dh, dw) != (h, w) {
            return Err(format_err(&dp, format!("{dh}x{dw} depth for a {h}x{w} image")));
        }
        let feats = match &features {
            Some(rows) => Some(rows.get(k).cloned().ok_or_else(|| format_err(&features_path, format!("missing row {}", k + 1)))?),
            None => None,
        };
        images.push(RealImage { rgb, depth: normalize_real_depth(&depth), h, w, class, features: feats });
    }
    Ok(RealDataset::new(images, N_CLASSES)?)
}

/// True depth maps in file order, for evaluation only.
pub fn load_true_depth(dir: &Path) -> Result<Vec<Vec<f64>>> {
    let labels_path = dir.join("labels.txt");
    read_text(&labels_path)?
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(|name| Ok(read_depth(&dir.join("depth").join(format!("{name}.depth")))?.0))
        .collect()
}

/// Ground-truth cameras, for analysis only.
pub fn load_gt_cameras(dir: &Path) -> Result<Vec<CameraParams>> {
    let p = dir.join(GT_CAMERAS_FILE);
    read_text(&p)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().skip(1).filter_map(|t| t.parse().ok()).collect();
            let a: [f64; 6] = v.try_into().map_err(|_| format_err(&p, "expected six values per camera"))?;
            Ok(CameraParams(a))
        })
        .collect()
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    toml::from_str(&read_text(&dir.join("dataset.toml"))?).map_err(|e| Error::Config(e.to_string()))
}
