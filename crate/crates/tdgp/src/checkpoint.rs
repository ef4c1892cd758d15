//! Versioned binary checkpoints of the complete training state.
//!
//! Layout (little endian): magic, version `u32`, model and training config as
//! a length-prefixed TOML string, step `u64`, RNG seed / stream / word
//! position, tensor groups (generator, EMA, discriminator, both optimizers'
//! moments), then a SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tdgp_core::adversary::{ModelConfig, TrainConfig, TrainState};
use tdgp_core::camera::{CameraGenerator, CameraMap};
use tdgp_core::diffmath::AdamState;
use tdgp_core::nn::Module;
use tdgp_core::Tensor;

use crate::error::{format_err, io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"TDGPCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensors<'a>(&mut self, ts: impl ExactSizeIterator<Item = &'a Tensor>) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for v in t.data() {
                self.0.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    fn adam(&mut self, a: &AdamState) {
        self.u64(a.t);
        self.tensors(a.m.iter());
        self.tensors(a.v.iter());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("unexpected end of data")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn tensors(&mut self) -> std::result::Result<Vec<Tensor>, String> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nd = self.u32()? as usize;
            let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = self.take(len.checked_mul(8).ok_or("tensor too large")?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
            out.push(Tensor::new(&shape, data).map_err(|e| e.to_string())?);
        }
        Ok(out)
    }
    fn adam(&mut self) -> std::result::Result<(u64, Vec<Tensor>, Vec<Tensor>), String> {
        Ok((self.u64()?, self.tensors()?, self.tensors()?))
    }
}

pub fn encode<C: CameraMap + Clone>(state: &TrainState<C>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let header = Header { model: state.model.clone(), train: state.train.clone() };
    w.bytes(toml::to_string(&header).expect("config serializes").as_bytes());
    w.u64(state.step);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.tensors(state.g.params().into_iter());
    w.tensors(state.ema.iter());
    w.tensors(state.d.params().into_iter());
    w.adam(&state.adam_g);
    w.adam(&state.adam_d);
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

fn replace_all(dst: Vec<&mut Tensor>, src: Vec<Tensor>, what: &str) -> std::result::Result<(), String> {
    if dst.len() != src.len() {
        return Err(format!("{what}: {} tensors stored, {} expected", src.len(), dst.len()));
    }
    for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.shape() != s.shape() {
            return Err(format!("{what}[{i}]: shape {:?} stored, {:?} expected", s.shape(), d.shape()));
        }
        *d = s;
    }
    Ok(())
}

fn restore_adam(a: &mut AdamState, (t, m, v): (u64, Vec<Tensor>, Vec<Tensor>), what: &str) -> std::result::Result<(), String> {
    a.t = t;
    replace_all(a.m.iter_mut().collect(), m, what)?;
    replace_all(a.v.iter_mut().collect(), v, what)
}

/// Decodes a checkpoint; `camera` builds an (arbitrarily initialized) camera
/// map of the stored architecture, whose weights are then overwritten.
pub fn decode_with<C, F>(bytes: &[u8], path: &Path, camera: F) -> Result<TrainState<C>>
where
    C: CameraMap + Clone,
    F: FnOnce(&mut ChaCha8Rng, &ModelConfig) -> tdgp_core::Result<C>,
{
    let bad = |m: String| format_err(path, m);
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let header_text = std::str::from_utf8(r.bytes().map_err(bad)?).map_err(|e| bad(e.to_string()))?;
    let header: Header = toml::from_str(header_text).map_err(|e| bad(e.to_string()))?;
    let step = r.u64().map_err(bad)?;
    let seed: [u8; 32] = r.take(32).map_err(bad)?.try_into().unwrap();
    let stream = r.u64().map_err(bad)?;
    let word_pos = u128::from_le_bytes(r.take(16).map_err(bad)?.try_into().unwrap());
    let g = r.tensors().map_err(bad)?;
    let ema = r.tensors().map_err(bad)?;
    let d = r.tensors().map_err(bad)?;
    let ag = r.adam().map_err(bad)?;
    let ad = r.adam().map_err(bad)?;
    if r.pos != body.len() {
        return Err(bad("trailing data".into()));
    }

    let train = header.train.clone();
    let mut state = TrainState::with_camera(header.model, TrainConfig { camera_warmup: 0, ..header.train }, 0, camera)?;
    state.train = train;
    replace_all(state.g.params_mut(), g, "generator").map_err(bad)?;
    replace_all(state.ema.iter_mut().collect(), ema, "ema").map_err(bad)?;
    replace_all(state.d.params_mut(), d, "discriminator").map_err(bad)?;
    restore_adam(&mut state.adam_g, ag, "generator moments").map_err(bad)?;
    restore_adam(&mut state.adam_d, ad, "discriminator moments").map_err(bad)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.step = step;
    Ok(state)
}

pub fn default_camera(rng: &mut ChaCha8Rng, m: &ModelConfig) -> tdgp_core::Result<CameraGenerator> {
    Ok(CameraGenerator::new(rng, &m.camera, m.scene.z_dim, m.scene.n_classes))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    decode_with(bytes, path, default_camera)
}

/// Writes through a temporary file so an interrupted save leaves the old
/// checkpoint intact.
pub fn save<C: CameraMap + Clone>(state: &TrainState<C>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&fs::read(path).map_err(io_err(path))?, path)
}

pub fn load_with<C, F>(path: &Path, camera: F) -> Result<TrainState<C>>
where
    C: CameraMap + Clone,
    F: FnOnce(&mut ChaCha8Rng, &ModelConfig) -> tdgp_core::Result<C>,
{
    decode_with(&fs::read(path).map_err(io_err(path))?, path, camera)
}
