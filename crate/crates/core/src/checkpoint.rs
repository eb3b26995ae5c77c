//! Binary trainer checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DAMA" | u32 version | u32 n | n bytes of JSON metadata
//! u32 count | count parameter records
//! u32 count | count optimizer-moment records
//! 32-byte rng seed | u64 stream | u128 word position
//! ```
//!
//! A record is `u32 name length | name | u32 rank | rank × u32 dims | f32
//! payload`. Parameters are named `branch1/…` and `branch2/…`; moments are
//! named `m:{set}/…` and `v:{set}/…`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DamaError, Result};
use crate::model::ParamStore;
use crate::optim::{Adam, Moments};
use crate::train::{Partner, TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"DAMA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    step: u64,
    adam_t: u64,
}

struct Record<'a> {
    name: String,
    shape: Vec<usize>,
    data: &'a [f32],
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DamaError::Contract(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_records(out: &mut Vec<u8>, records: &[Record]) -> Result<()> {
    put_u32(out, records.len())?;
    for r in records {
        put_u32(out, r.name.len())?;
        out.extend_from_slice(r.name.as_bytes());
        put_u32(out, r.shape.len())?;
        for &d in &r.shape {
            put_u32(out, d)?;
        }
        for v in r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = Meta { config: state.config.clone(), step: state.step, adam_t: state.adam.t };
    let json = serde_json::to_vec(&meta).map_err(|e| DamaError::Contract(format!("metadata: {e}")))?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);

    let mut sets = vec![("branch1", &state.branch1)];
    match &state.partner {
        Partner::Shared => {}
        Partner::Teacher(p) | Partner::Student(p) => sets.push(("branch2", p)),
    }
    let params: Vec<Record> = sets
        .iter()
        .flat_map(|(prefix, store)| {
            store.iter().map(move |(name, p)| Record {
                name: format!("{prefix}/{name}"),
                shape: p.shape.clone(),
                data: &p.data,
            })
        })
        .collect();
    put_records(&mut out, &params)?;

    let mut moments = Vec::with_capacity(2 * state.adam.moments.len());
    for (key, m) in &state.adam.moments {
        moments.push(Record { name: format!("m:{key}"), shape: vec![m.m.len()], data: &m.m });
        moments.push(Record { name: format!("v:{key}"), shape: vec![m.v.len()], data: &m.v });
    }
    put_records(&mut out, &moments)?;

    out.extend_from_slice(&state.rng.get_seed());
    out.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    Ok(out)
}

/// Name, dims and payload of one stored tensor.
type StoredTensor = (String, Vec<usize>, Vec<f32>);

/// First and second Adam moments of one parameter, as they are found.
type MomentHalves = (Option<Vec<f32>>, Option<Vec<f32>>);

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> DamaError {
        DamaError::Format { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn records(&mut self, what: &str) -> Result<Vec<StoredTensor>> {
        let count = self.u32(what)?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u32("record name length")?;
            let name = std::str::from_utf8(self.take(len, "record name")?)
                .map_err(|_| self.fail("record name is not UTF-8"))?
                .to_string();
            let rank = self.u32("record rank")?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(self.u32("record dims")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| self.fail(format!("record {name} is too large")))?;
            let data = self
                .take(n, &format!("payload of {name}"))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push((name, shape, data));
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(DamaError::Format { offset: 0, msg: "not a checkpoint (bad magic)".into() });
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(DamaError::Format {
            offset: 4,
            msg: format!("checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"),
        });
    }
    let len = r.u32("metadata length")?;
    let at = r.pos;
    let meta: Meta = serde_json::from_slice(r.take(len, "metadata")?)
        .map_err(|e| DamaError::Format { offset: at as u64, msg: format!("metadata: {e}") })?;

    let mut state = TrainState::new(meta.config)?;
    let at = r.pos;
    let mut stores: BTreeMap<String, ParamStore> = BTreeMap::new();
    for (name, shape, data) in r.records("parameter count")? {
        let (set, param) = name
            .split_once('/')
            .ok_or_else(|| DamaError::Format { offset: at as u64, msg: format!("parameter {name} has no set") })?;
        stores.entry(set.to_string()).or_default().insert(param, shape, data)?;
    }
    let corrupt = |msg: String| DamaError::Format { offset: at as u64, msg };
    let b1 = stores.remove("branch1").ok_or_else(|| corrupt("missing branch1 parameters".into()))?;
    if !congruent(&b1, &state.branch1) {
        return Err(corrupt("branch1 parameters do not match the configured model".into()));
    }
    state.branch1 = b1;
    match &mut state.partner {
        Partner::Shared => {}
        Partner::Teacher(p) | Partner::Student(p) => {
            let b2 = stores.remove("branch2").ok_or_else(|| corrupt("missing branch2 parameters".into()))?;
            if !congruent(&b2, p) {
                return Err(corrupt("branch2 parameters do not match the configured model".into()));
            }
            *p = b2;
        }
    }
    if let Some(extra) = stores.keys().next() {
        return Err(corrupt(format!("unexpected parameter set {extra}")));
    }

    let at = r.pos;
    let mut adam = Adam::new(state.config.adam());
    adam.t = meta.adam_t;
    let mut halves: BTreeMap<String, MomentHalves> = BTreeMap::new();
    for (name, _, data) in r.records("moment count")? {
        let slot = halves.entry(name.get(2..).unwrap_or_default().to_string()).or_default();
        match name.get(..2) {
            Some("m:") => slot.0 = Some(data),
            Some("v:") => slot.1 = Some(data),
            _ => return Err(DamaError::Format { offset: at as u64, msg: format!("bad moment record {name}") }),
        }
    }
    for (key, pair) in halves {
        match pair {
            (Some(m), Some(v)) if m.len() == v.len() => {
                adam.moments.insert(key, Moments { m, v });
            }
            _ => return Err(DamaError::Format { offset: at as u64, msg: format!("incomplete moments for {key}") }),
        }
    }
    state.adam = adam;

    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
    let stream = u64::from_le_bytes(r.take(8, "rng stream")?.try_into().expect("8 bytes"));
    let word = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word);
    state.rng = rng;
    state.step = meta.step;
    Ok(state)
}

fn congruent(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((na, pa), (nb, pb))| na == nb && pa.shape == pb.shape)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(state)?;
    fs::write(path, bytes).map_err(|e| DamaError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DamaError::io(path, e))?;
    decode_checkpoint(&bytes)
}
