use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdgp::config::ExperimentConfig;
use tdgp::experiments::{
    any_eval_nfs, median, render_sample, run_camera_variant, run_depth_variant, train_until, AnyState, CameraRow,
    CameraVariant, DepthRow, DEPTH_VARIANTS,
};
use tdgp::{dataset, formats, report, synthetic};
use tdgp_core::camera::{N_PARAMS, PARAM_NAMES};
use tdgp_core::evalkit::{nfs, normalize_near_far};

#[derive(Parser)]
#[command(name = "tdgp", version, about = "Tri-plane 3D generator: data, training, evaluation and ablations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags that override keys of the configuration file.
#[derive(Args, Clone, Debug)]
struct Overrides {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Probability of showing raw rendered depth to the discriminator.
    #[arg(long = "p-depth")]
    p_depth: Option<f64>,
    /// Camera regularization.
    #[arg(long, value_enum)]
    reg: Option<CameraVariant>,
}

impl Overrides {
    fn resolve(&self) -> Result<(ExperimentConfig, CameraVariant)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(p) = self.p_depth {
            cfg.train.p_raw = p;
        }
        let variant = self.reg.unwrap_or(match cfg.train.camera_reg {
            tdgp_core::adversary::CameraReg::None => CameraVariant::NoReg,
            tdgp_core::adversary::CameraReg::GradPenalty => CameraVariant::GradPenalty,
            tdgp_core::adversary::CameraReg::Emd => CameraVariant::Emd,
        });
        cfg.train.camera_reg = variant.reg();
        cfg.validate()?;
        Ok((cfg, variant))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset.
    GenData {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        out: PathBuf,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a generator, writing checkpoints and metric logs.
    Train {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Print the non-flatness score of a dataset's true depth or of a checkpoint.
    EvalNfs {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render one generated image and its depth map.
    Render {
        #[command(flatten)]
        o: Overrides,
        /// Untrained generator from the configuration when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        class: usize,
    },
    /// Median NFS per depth-supervision setting over several seeds.
    AblateDepth {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Camera posterior spread per regularizer over several seeds.
    AblateCamera {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct RunInfo {
    config_hash: String,
    seed: u64,
    variant: CameraVariant,
}

const LATEST: &str = "latest.ckpt";

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TDGP_LOG", "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { o, out, overwrite } => {
            let (cfg, _) = o.resolve()?;
            info!("rendering {} scenes into {} (config {}, seed {})", cfg.data.n_scenes, out.display(), cfg.hash(), cfg.seed);
            dataset::generate(&out, &cfg.data, &cfg.model.render, cfg.seed, &cfg.hash(), overwrite)?;
            println!("config_hash={}\nseed={}\nscenes={}", cfg.hash(), cfg.seed, cfg.data.n_scenes);
        }
        Cmd::Train { o, data, out, resume } => train(&o, &data, &out, resume)?,
        Cmd::EvalNfs { o, data, checkpoint } => {
            let (cfg, variant) = o.resolve()?;
            let score = match (data, checkpoint) {
                (Some(dir), _) => dataset_nfs(&dir, cfg.eval.nfs_bins)?,
                (None, Some(path)) => any_eval_nfs(&AnyState::load(&path, variant)?, &cfg, cfg.seed)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            println!("config_hash={}\nseed={}\nnfs={score}", cfg.hash(), cfg.seed);
        }
        Cmd::Render { o, checkpoint, out, res, class } => {
            let (cfg, variant) = o.resolve()?;
            let state = match checkpoint {
                Some(p) => AnyState::load(&p, variant)?,
                None => AnyState::new(&cfg, variant)?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let s = match &state {
                AnyState::Standard(s) => render_sample(&s.ema_generator(), &s.model, res, class, &mut rng)?,
                AnyState::Residual(s) => render_sample(&s.ema_generator(), &s.model, res, class, &mut rng)?,
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            formats::write_ppm(&out.join("image.ppm"), &s.rgb, res, res)?;
            formats::write_depth(&out.join("depth.depth"), &s.depth, res, res)?;
            println!("config_hash={}\nseed={}", cfg.hash(), cfg.seed);
            for (name, v) in PARAM_NAMES.iter().zip(s.camera.0) {
                println!("camera.{name}={v}");
            }
        }
        Cmd::AblateDepth { o, data, out, seeds } => ablate_depth(&o, &data, &out, seeds)?,
        Cmd::AblateCamera { o, data, out, seeds } => ablate_camera(&o, &data, &out, seeds)?,
    }
    Ok(())
}

fn dataset_nfs(dir: &Path, bins: usize) -> Result<f64> {
    let meta = dataset::read_meta(dir)?;
    let gt = synthetic::gt_render_config(&meta.data, &meta.render);
    let maps = dataset::load_true_depth(dir)?;
    Ok(nfs(maps.len(), bins, |i| Ok(normalize_near_far(&maps[i], gt.t_near, gt.t_far)))?)
}

fn train(o: &Overrides, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let (cfg, variant) = o.resolve()?;
    let images = dataset::load(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let latest = out.join(LATEST);
    let mut state = if resume {
        let info: RunInfo = serde_json::from_str(&fs::read_to_string(out.join("run.json")).context("reading run.json")?)?;
        AnyState::load(&latest, info.variant)?
    } else {
        if latest.exists() {
            bail!("{} already holds a run; pass --resume to continue it", out.display());
        }
        fs::write(out.join("config.toml"), cfg.to_toml())?;
        let info = RunInfo { config_hash: cfg.hash(), seed: cfg.seed, variant };
        fs::write(out.join("run.json"), serde_json::to_string_pretty(&info)?)?;
        AnyState::new(&cfg, variant)?
    };
    info!("training {} to step {} (config {}, seed {})", variant.name(), cfg.steps, cfg.hash(), cfg.seed);
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join("metrics.jsonl"))?;
    while state.step() < cfg.steps {
        let chunk = if cfg.checkpoint_every > 0 { (state.step() / cfg.checkpoint_every + 1) * cfg.checkpoint_every } else { cfg.steps };
        let until = chunk.min(cfg.steps);
        let mut err = None;
        train_until(&mut state, &images, until, |m| {
            if cfg.log_every > 0 && (m.step + 1) % cfg.log_every == 0 {
                info!("step {} d={:.4} g={:.4} r1={:.4} dist={:.4}", m.step + 1, m.d_total, m.g_total, m.r1, m.dist);
                if let Err(e) = writeln!(log, "{}", serde_json::to_string(m).expect("metrics serialize")) {
                    err.get_or_insert(e);
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e).context("writing metrics.jsonl");
        }
        state.save(&latest)?;
        if cfg.checkpoint_every > 0 {
            state.save(&out.join(format!("step-{:08}.ckpt", state.step())))?;
        }
    }
    println!("config_hash={}\nseed={}\nstep={}\nnfs={}", cfg.hash(), cfg.seed, state.step(), any_eval_nfs(&state, &cfg, cfg.seed)?);
    Ok(())
}

#[derive(Serialize)]
struct DepthReport {
    config_hash: String,
    seeds: Vec<u64>,
    steps: u64,
    median_nfs: BTreeMap<String, f64>,
    runs: Vec<DepthRow>,
}

fn ablate_depth(o: &Overrides, data: &Path, out: &Path, seeds: u64) -> Result<()> {
    let (cfg, _) = o.resolve()?;
    let images = dataset::load(data)?;
    let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
    let mut runs = Vec::new();
    for v in DEPTH_VARIANTS {
        for &s in &seed_list {
            info!("depth ablation {} seed {s}", tdgp::experiments::depth_variant_name(v));
            let row = run_depth_variant(&cfg, &images, v, s, |_| {})?;
            info!("nfs {:.3}", row.nfs);
            runs.push(row);
        }
    }
    let median_nfs = DEPTH_VARIANTS
        .iter()
        .map(|&v| {
            let name = tdgp::experiments::depth_variant_name(v);
            let vals: Vec<f64> = runs.iter().filter(|r| r.variant == name).map(|r| r.nfs).collect();
            (name, median(&vals))
        })
        .collect();
    let rep = DepthReport { config_hash: cfg.hash(), seeds: seed_list, steps: cfg.steps, median_nfs, runs };
    print!("{}", report::write_report(out, "ablate_depth", &rep)?);
    Ok(())
}

#[derive(Serialize)]
struct CameraReport {
    config_hash: String,
    seeds: Vec<u64>,
    steps: u64,
    params: [&'static str; N_PARAMS],
    /// Median posterior-to-prior std ratio, by variant and parameter.
    median_ratio: BTreeMap<String, BTreeMap<String, f64>>,
    runs: Vec<CameraRow>,
}

fn ablate_camera(o: &Overrides, data: &Path, out: &Path, seeds: u64) -> Result<()> {
    let (cfg, _) = o.resolve()?;
    let images = dataset::load(data)?;
    let seed_list: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
    let mut runs = Vec::new();
    for v in CameraVariant::ALL {
        for &s in &seed_list {
            info!("camera ablation {} seed {s}", v.name());
            runs.push(run_camera_variant(&cfg, &images, v, s, |_| {})?);
        }
    }
    let median_ratio = CameraVariant::ALL
        .iter()
        .map(|v| {
            let rows: Vec<&CameraRow> = runs.iter().filter(|r| r.variant == v.name()).collect();
            let per = PARAM_NAMES.iter().enumerate().map(|(i, p)| (p.to_string(), median(&rows.iter().map(|r| r.ratio[i]).collect::<Vec<_>>())));
            (v.name().to_string(), per.collect())
        })
        .collect();
    let rep = CameraReport { config_hash: cfg.hash(), seeds: seed_list, steps: cfg.steps, params: PARAM_NAMES, median_ratio, runs };
    print!("{}", report::write_report(out, "ablate_camera", &rep)?);
    Ok(())
}
