//! Binary checkpoints: parameters, momentum buffers, RNG position and the
//! metric history, all bit-exact.
//!
//! ```text
//! "SIPLCKPT" | u32 version | config text | u64 epoch | rng (seed, stream, word pos)
//! | u32 n | n x (name, rank, extents, f64 data, f64 velocity)
//! | history | u32 CRC32 of everything before
//! ```
//! Strings are a u32 byte length followed by UTF-8; all integers and floats
//! are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::EpochRecord;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Parameter, Tensor};

const MAGIC: &[u8; 8] = b"SIPLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: usize,
    pub store: ParamStore,
    pub velocity: Vec<Tensor>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

#[derive(Default)]
struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u32(xs.len() as u32);
        xs.iter().for_each(|&x| self.f64(x));
    }
}

struct R<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> R<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: "truncated checkpoint".into(),
            });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            message: "string is not UTF-8".into(),
        })
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = W::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&ck.config_text);
    w.u64(ck.epoch as u64);
    w.0.extend_from_slice(&ck.rng.get_seed());
    w.u64(ck.rng.get_stream());
    w.0.extend_from_slice(&ck.rng.get_word_pos().to_le_bytes());
    w.u32(ck.store.len() as u32);
    for (p, v) in ck.store.iter().zip(&ck.velocity) {
        w.str(&p.name);
        w.u8(p.trainable as u8);
        w.u32(p.tensor.rank() as u32);
        p.tensor.shape().iter().for_each(|&e| w.u32(e as u32));
        w.f64s(p.tensor.data());
        w.f64s(v.data());
    }
    w.u32(ck.history.len() as u32);
    for r in &ck.history {
        w.u64(r.epoch as u64);
        w.f64(r.lr);
        w.f64(r.seg);
        w.f64s(&r.aux);
        w.f64(r.total);
        match r.val_dsc {
            Some(v) => {
                w.u8(1);
                w.f64(v);
            }
            None => w.u8(0),
        }
        match &r.val_per_class {
            Some(v) => {
                w.u8(1);
                w.f64s(v);
            }
            None => w.u8(0),
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 {
        return Err(Error::Format {
            offset: 0,
            message: "checkpoint too short".into(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4"));
    let mut r = R { b: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    if stored != crc32fast::hash(body) {
        return Err(Error::Format {
            offset: body.len() as u64,
            message: "checkpoint CRC mismatch".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let config_text = r.str()?;
    let epoch = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    let mut velocity = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
        let tensor = Tensor::new(shape.clone(), r.f64s()?)?;
        velocity.push(Tensor::new(shape, r.f64s()?)?);
        store.add(Parameter {
            name,
            tensor,
            trainable,
        });
    }
    let h = r.u32()? as usize;
    let mut history = Vec::with_capacity(h);
    for _ in 0..h {
        let epoch = r.u64()? as usize;
        let lr = r.f64()?;
        let seg = r.f64()?;
        let aux = r.f64s()?;
        let total = r.f64()?;
        let val_dsc = if r.u8()? == 1 { Some(r.f64()?) } else { None };
        let val_per_class = if r.u8()? == 1 { Some(r.f64s()?) } else { None };
        history.push(EpochRecord {
            epoch,
            lr,
            seg,
            aux,
            total,
            val_dsc,
            val_per_class,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "trailing bytes in checkpoint".into(),
        });
    }
    Ok(Checkpoint {
        config_text,
        epoch,
        store,
        velocity,
        rng,
        history,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
