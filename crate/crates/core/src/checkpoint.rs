//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "ICTCKPT\0"
//! version      u32
//! config       u64 length + UTF-8 text (rendered ExperimentConfig)
//! step         u64
//! embedding    u8 kind (0 fourier, 1 positional), f64 scale, f64 array
//! params       f64 array
//! ema          f64 array
//! teacher      u8 flag, then f64 array when the flag is 1
//! optimizer    u64 step count, f64 array m, f64 array v
//! ```
//!
//! An "f64 array" is a u64 count followed by that many values.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::consistency::ConsistencyModel;
use crate::error::{Error, Result};
use crate::net::{EmbeddingKind, Network, NoiseEmbedding};
use crate::train::{Moments, TrainState};

pub const MAGIC: &[u8; 8] = b"ICTCKPT\0";
pub const VERSION: u32 = 1;

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
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
    fn array(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ck_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| ck_err("length overflow"))?;
        if n > self.buf.len() - self.pos {
            return Err(ck_err(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }
    fn array(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Serializes a training state together with its config.
pub fn encode(config: &ExperimentConfig, state: &TrainState<f64>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let text = config.render();
    w.u64(text.len() as u64);
    w.0.extend_from_slice(text.as_bytes());
    w.u64(state.step as u64);
    let emb = state.model.network().embedding();
    w.u8(match emb.kind() {
        EmbeddingKind::Fourier => 0,
        EmbeddingKind::Positional => 1,
    });
    w.f64(emb.scale());
    w.array(emb.frequencies());
    w.array(state.params());
    w.array(&state.ema);
    match &state.teacher {
        Some(t) => {
            w.u8(1);
            w.array(t);
        }
        None => w.u8(0),
    }
    w.u64(state.moments.t);
    w.array(&state.moments.m);
    w.array(&state.moments.v);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<(ExperimentConfig, TrainState<f64>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.bytes(8).ok() != Some(MAGIC.as_slice()) {
        return Err(ck_err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ck_err(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let text = std::str::from_utf8(r.bytes(n)?).map_err(|_| ck_err("config is not UTF-8"))?;
    let config = ExperimentConfig::parse(text)?;
    let step = r.u64()? as usize;
    let kind = match r.u8()? {
        0 => EmbeddingKind::Fourier,
        1 => EmbeddingKind::Positional,
        k => return Err(ck_err(format!("unknown embedding kind {k}"))),
    };
    let scale = r.f64()?;
    let embedding = NoiseEmbedding::from_parts(kind, scale, r.array()?)?;
    let params = r.array()?;
    let ema = r.array()?;
    let teacher = match r.u8()? {
        0 => None,
        1 => Some(r.array()?),
        f => return Err(ck_err(format!("bad teacher flag {f}"))),
    };
    let t = r.u64()?;
    let m = r.array()?;
    let v = r.array()?;
    if r.pos != bytes.len() {
        return Err(ck_err("trailing bytes after checkpoint"));
    }
    let count = params.len();
    if ema.len() != count || m.len() != count || v.len() != count || teacher.as_ref().is_some_and(|t| t.len() != count)
    {
        return Err(ck_err("parameter arrays disagree in length"));
    }
    let tc = &config.train;
    let net = Network::from_parts(tc.topology.clone(), embedding, params)?;
    let model = ConsistencyModel::new(net, tc.grid.sigma_min, tc.grid.sigma_max, tc.sigma_data)?;
    let state = TrainState {
        model,
        ema,
        teacher,
        moments: Moments { m, v, t },
        step,
    };
    Ok((config, state))
}

pub fn save(path: &Path, config: &ExperimentConfig, state: &TrainState<f64>) -> Result<()> {
    std::fs::write(path, encode(config, state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ExperimentConfig, TrainState<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| ck_err(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticDistribution;
    use crate::train::{TeacherRule, Trainer};

    fn config() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(SyntheticDistribution::square_mixture(1.0, 0.2).unwrap()).unwrap();
        c.train.topology.hidden = vec![6, 5];
        c.train.topology.embedding_dim = 4;
        c.train.batch_size = 4;
        c.train.steps = 6;
        c.train.teacher = TeacherRule::Ema { mu0: 0.9 };
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = config();
        let mut t = Trainer::new(c.train.clone()).unwrap();
        for _ in 0..3 {
            t.step().unwrap();
        }
        let bytes = encode(&c, t.state());
        let (c2, s2) = decode(&bytes).unwrap();
        assert_eq!(c2, c);
        assert_eq!(s2.params(), t.state().params());
        assert_eq!(s2.ema, t.state().ema);
        assert_eq!(s2.teacher, t.state().teacher);
        assert_eq!(s2.moments, t.state().moments);
        assert_eq!(s2.step, 3);
        assert_eq!(s2.model.network().embedding(), t.state().model.network().embedding());
        assert_eq!(encode(&c2, &s2), bytes);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let c = config();
        let mut full = Trainer::new(c.train.clone()).unwrap();
        full.run().unwrap();
        let mut half = Trainer::new(c.train.clone()).unwrap();
        for _ in 0..3 {
            half.step().unwrap();
        }
        let (c2, s2) = decode(&encode(&c, half.state())).unwrap();
        let mut resumed = Trainer::resume(c2.train, s2).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.state().params(), full.state().params());
    }

    #[test]
    fn corrupt_input_rejected() {
        let c = config();
        let bytes = encode(&c, &crate::train::TrainState::init(&c.train).unwrap());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
