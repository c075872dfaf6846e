//! Binary checkpoints of a full training state.
//!
//! Layout (little endian): magic `DNGPU\x01`, the config text, model
//! tensors, optimizer tensors, step counter and the generator position.
//! Tensor data is always stored as f64 so f32 and f64 runs share a format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optimizer::{AdaMaxState, LrSchedule};
use crate::tensor::{Real, Tensor};
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 5] = b"DNGPU";
pub const VERSION: u8 = 1;

struct Named {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes32(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn tensors(&mut self, ts: &[Named]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.u16(t.name.len() as u16);
            self.buf.extend_from_slice(t.name.as_bytes());
            self.u8(t.shape.len() as u8);
            for &d in &t.shape {
                self.u32(d as u32);
            }
            for &v in &t.data {
                self.buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensors(&mut self) -> std::result::Result<Vec<Named>, String> {
        let count = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
                return Err(format!("truncated in tensor {name}"));
            }
            let data = (0..n).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
            out.push(Named { name, shape, data });
        }
        Ok(out)
    }
}

fn named<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Named {
    Named {
        name: name.into(),
        shape: t.shape().to_vec(),
        data: t.to_f64_vec(),
    }
}

/// Serialize a training state.
pub fn to_bytes<T: Real>(state: &TrainState<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u8(VERSION);
    w.bytes32(state.config.to_text().as_bytes());

    let params = state.params.params();
    let model: Vec<Named> = params.iter().map(|p| named(p.name.clone(), &p.value)).collect();
    w.tensors(&model);

    let mut optim = Vec::new();
    for (p, m) in params.iter().zip(&state.optim.first_moment) {
        optim.push(named(format!("adamax.m.{}", p.name), m));
    }
    for (p, u) in params.iter().zip(&state.optim.decayed_max) {
        optim.push(named(format!("adamax.u.{}", p.name), u));
    }
    optim.push(Named {
        name: "adamax.t".into(),
        shape: vec![1],
        data: vec![state.optim.t as f64],
    });
    let s = &state.schedule;
    optim.push(Named {
        name: "schedule".into(),
        shape: vec![5],
        data: vec![s.lr, s.smoothed.unwrap_or(f64::NAN), s.best, s.best_step as f64, s.stall as f64],
    });
    w.tensors(&optim);

    w.u64(state.step);
    for chunk in state.rng.get_seed().chunks(8) {
        w.u64(u64::from_le_bytes(chunk.try_into().unwrap()));
    }
    w.u64(state.rng.get_stream());
    let pos = state.rng.get_word_pos();
    w.u64(pos as u64);
    w.u64((pos >> 64) as u64);
    w.buf
}

/// Read just the configuration stored in a checkpoint.
pub fn peek_config(bytes: &[u8]) -> std::result::Result<TrainConfig, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    read_config(&mut r)
}

fn read_config(r: &mut Reader) -> std::result::Result<TrainConfig, String> {
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err("not a dngpu checkpoint".into());
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}, expected {VERSION}"));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| "config is not UTF-8")?;
    TrainConfig::from_text(text).map_err(|e| format!("bad config: {e}"))
}

fn tensor_from<T: Real>(n: &Named, expect: &[usize]) -> std::result::Result<Tensor<T>, String> {
    if n.shape != expect {
        return Err(format!("{} has shape {:?}, expected {:?}", n.name, n.shape, expect));
    }
    Tensor::from_f64(&n.shape, &n.data).map_err(|e| e.to_string())
}

/// Deserialize a training state; the stored precision is ignored in favour
/// of `T`.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> std::result::Result<TrainState<T>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let config = read_config(&mut r)?;
    let model_config = config.model_config();
    // Fresh parameters give the expected names and shapes.
    let mut template_rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::<T>::init(&model_config, &mut template_rng).map_err(|e| e.to_string())?;

    let model = r.tensors()?;
    if model.len() != params.params().len() {
        return Err(format!("expected {} model tensors, found {}", params.params().len(), model.len()));
    }
    for (p, n) in params.params_mut().into_iter().zip(&model) {
        if p.name != n.name {
            return Err(format!("expected tensor {}, found {}", p.name, n.name));
        }
        p.value = tensor_from(n, p.value.shape())?;
    }

    let optim_tensors = r.tensors()?;
    let k = model.len();
    if optim_tensors.len() != 2 * k + 2 {
        return Err("optimizer section has the wrong number of tensors".into());
    }
    let mut optim = AdaMaxState::new(params.params());
    for (i, p) in params.params().iter().enumerate() {
        let m = &optim_tensors[i];
        let u = &optim_tensors[k + i];
        if m.name != format!("adamax.m.{}", p.name) || u.name != format!("adamax.u.{}", p.name) {
            return Err(format!("optimizer tensors for {} are missing", p.name));
        }
        optim.first_moment[i] = tensor_from(m, p.value.shape())?;
        optim.decayed_max[i] = tensor_from(u, p.value.shape())?;
    }
    let t = &optim_tensors[2 * k];
    let s = &optim_tensors[2 * k + 1];
    if t.name != "adamax.t" || t.data.len() != 1 || s.name != "schedule" || s.data.len() != 5 {
        return Err("optimizer counters are malformed".into());
    }
    optim.t = t.data[0] as u64;
    let schedule = LrSchedule {
        lr: s.data[0],
        smoothed: (!s.data[1].is_nan()).then_some(s.data[1]),
        best: s.data[2],
        best_step: s.data[3] as u64,
        stall: s.data[4] as u64,
    };

    let step = r.u64()?;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&r.u64()?.to_le_bytes());
    }
    let stream = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(lo | (hi << 64));

    Ok(TrainState {
        config,
        params,
        optim,
        schedule,
        step,
        rng,
    })
}

pub fn save<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    peek_config(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;

    fn small() -> TrainState<f32> {
        let mut c = TrainConfig::default();
        c.task = TaskKind::Addition;
        c.maps = 6;
        c.bins = vec![3, 5];
        c.eval_length = 9;
        TrainState::new(c).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut st = small();
        st.optim.t = 7;
        st.schedule.smoothed = Some(0.25);
        st.step = 42;
        let bytes = to_bytes(&st);
        let back: TrainState<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back, st);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&small());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 3]).unwrap_err().contains("truncated"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
        let mut ver = bytes.clone();
        ver[5] = 9;
        assert!(from_bytes::<f32>(&ver).unwrap_err().contains("version"));
    }
}
