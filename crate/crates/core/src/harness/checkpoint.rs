//! Binary checkpoint container, all integers and floats little-endian:
//!
//! ```text
//! magic   b"TRCK"
//! u32     version (1)
//! u64     config length, then that many bytes of RunConfig JSON
//! u64     step
//! [u8;32] batch RNG seed, u64 stream, u128 word position
//! u8      best-val flag, f64 best-val
//! u64     parameter count, then per parameter:
//!         u32 name length, name bytes (UTF-8),
//!         u32 rank, u64 per dim,
//!         f64 values, f64 first moments, f64 second moments
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::optim::Moments;
use super::step::TrainState;
use crate::nn::Model;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TRCK";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn encode(cfg: &RunConfig, model: &Model, state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(MAGIC);
    w.u32(VERSION);
    let json = cfg.to_json();
    w.u64(json.len() as u64);
    w.bytes(json.as_bytes());
    w.u64(state.step);
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.u128(state.rng.get_word_pos());
    w.u8(state.best_val.is_some() as u8);
    w.0.extend(state.best_val.unwrap_or(0.0).to_le_bytes());
    w.u64(model.store.len() as u64);
    for (id, name, t) in model.store.iter() {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
        w.f64s(&state.moments.m[id.index()]);
        w.f64s(&state.moments.v[id.index()]);
    }
    w.0
}

/// Rebuilds the run from bytes. Parameter names and shapes must match the
/// architecture described by the embedded config.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, Model, TrainState)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: VERSION,
        });
    }
    let n = r.len()?;
    let json = std::str::from_utf8(r.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let cfg = RunConfig::from_json(json)?;
    let mut model = Model::new(cfg.model, cfg.seed)?;
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let has_best = r.u8()? != 0;
    let best = r.f64()?;
    let count = r.len()?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, architecture has {}",
            model.store.len()
        )));
    }
    let mut moments = Moments::zeros(&model.store);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_string();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
        if shape != model.store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, expected {:?}",
                model.store.get(id).shape()
            )));
        }
        let numel = shape.iter().product();
        let values = r.f64s(numel)?;
        model.store.get_mut(id).data_mut().copy_from_slice(&values);
        moments.m[id.index()] = r.f64s(numel)?;
        moments.v[id.index()] = r.f64s(numel)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let state = TrainState {
        step,
        rng,
        moments,
        best_val: has_best.then_some(best),
    };
    Ok((cfg, model, state))
}

pub fn save(path: &Path, cfg: &RunConfig, model: &Model, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode(cfg, model, state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, Model, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
