//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `"HACT"`, version byte, u32 record count, then per
//! record a u16 name length, the UTF-8 name, a kind byte (0 f64, 1 bytes,
//! 2 u64), a u8 rank, u64 extents and the payload. A SHA-256 digest of
//! everything before it closes the file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::model::{build_model, Model};
use crate::pruning::PruneMask;
use crate::train::RngState;

use super::config::ExperimentConfig;
use super::formats::{hierarchy_from_text, hierarchy_to_text};

pub const MAGIC: &[u8; 4] = b"HACT";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Configuration snapshot; enough to rebuild the model and the data split.
    pub config: ExperimentConfig,
    pub model: Model,
    pub hierarchy: Option<Hierarchy>,
    pub rng: RngState,
    /// Free-form label of the producing step, e.g. `first_pass`.
    pub stage: String,
}

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F64(Vec<f64>),
    Bytes(Vec<u8>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
struct Record {
    name: String,
    dims: Vec<usize>,
    payload: Payload,
}

impl Record {
    fn f64(name: impl Into<String>, dims: &[usize], data: &[f64]) -> Self {
        Record { name: name.into(), dims: dims.to_vec(), payload: Payload::F64(data.to_vec()) }
    }

    fn bytes(name: impl Into<String>, data: Vec<u8>) -> Self {
        Record { name: name.into(), dims: vec![data.len()], payload: Payload::Bytes(data) }
    }

    fn u64(name: impl Into<String>, data: Vec<u64>) -> Self {
        Record { name: name.into(), dims: vec![data.len()], payload: Payload::U64(data) }
    }
}

fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.push(VERSION);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        let kind = match r.payload {
            Payload::F64(_) => 0u8,
            Payload::Bytes(_) => 1,
            Payload::U64(_) => 2,
        };
        out.push(kind);
        out.push(r.dims.len() as u8);
        for &d in &r.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &r.payload {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bytes(v) => out.extend_from_slice(v),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                message: format!("file ends while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 4 + 1 + 4 + 32 {
        return Err(Error::Checkpoint { offset: bytes.len(), message: "file too short".into() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint { offset: 0, message: "bad magic, not a checkpoint".into() });
    }
    if bytes[4] != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            message: format!("unsupported version {} (expected {VERSION})", bytes[4]),
        });
    }
    let body_len = bytes.len() - 32;
    let mut r = Reader { bytes: &bytes[..body_len], pos: 5 };
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for i in 0..count {
        let what = format!("record {i}");
        let name_len = r.u16(&what)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &what)?)
            .map_err(|_| Error::Checkpoint { offset: r.pos, message: format!("{what} has a non-UTF-8 name") })?
            .to_string();
        let kind_at = r.pos;
        let kind = r.u8(&name)?;
        let rank = r.u8(&name)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&name)? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint {
            offset: kind_at,
            message: format!("{name}: extents overflow"),
        })?;
        let width = match kind {
            0 | 2 => 8,
            1 => 1,
            k => return Err(Error::Checkpoint { offset: kind_at, message: format!("{name}: unknown kind {k}") }),
        };
        let len = n.checked_mul(width).ok_or_else(|| Error::Checkpoint { offset: kind_at, message: format!("{name}: size overflow") })?;
        let raw = r.take(len, &name)?;
        let payload = match kind {
            0 => Payload::F64(raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            1 => Payload::Bytes(raw.to_vec()),
            _ => Payload::U64(raw.chunks(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
        };
        records.push(Record { name, dims, payload });
    }
    if r.pos != body_len {
        return Err(Error::Checkpoint { offset: r.pos, message: "unexpected bytes after the last record".into() });
    }
    if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
        return Err(Error::Checkpoint { offset: body_len, message: "checksum mismatch, file is corrupt".into() });
    }
    Ok(records)
}

fn to_records(ck: &Checkpoint) -> Vec<Record> {
    let mut out = vec![
        Record::bytes("config", ck.config.to_text().into_bytes()),
        Record::bytes("stage", ck.stage.clone().into_bytes()),
        Record::u64("rng", vec![ck.rng.seed, ck.rng.stream, ck.rng.word_pos as u64, (ck.rng.word_pos >> 64) as u64]),
        Record::u64("trained_epochs", vec![ck.model.trained_epochs() as u64]),
    ];
    if let Some(h) = &ck.hierarchy {
        out.push(Record::bytes("hierarchy", hierarchy_to_text(h).into_bytes()));
    }
    for (name, t) in ck.model.parameters() {
        out.push(Record::f64(format!("param/{name}"), t.shape(), t.data()));
    }
    for (i, s) in ck.model.running_stats().iter().enumerate() {
        out.push(Record::f64(format!("running/{i}/mean"), &[s.mean.len()], &s.mean));
        out.push(Record::f64(format!("running/{i}/var"), &[s.var.len()], &s.var));
    }
    for (i, m) in ck.model.pruned().layers().iter().enumerate() {
        out.push(Record::bytes(format!("mask/{i}"), m.iter().map(|&b| u8::from(b)).collect()));
    }
    out
}

fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Record> {
    records.iter().find(|r| r.name == name).ok_or_else(|| Error::Checkpoint {
        offset: 0,
        message: format!("missing record {name}"),
    })
}

fn text(records: &[Record], name: &str) -> Result<String> {
    match &find(records, name)?.payload {
        Payload::Bytes(b) => String::from_utf8(b.clone()).map_err(|_| Error::Checkpoint { offset: 0, message: format!("{name} is not UTF-8") }),
        _ => Err(Error::Checkpoint { offset: 0, message: format!("{name} has the wrong kind") }),
    }
}

fn floats<'a>(records: &'a [Record], name: &str, dims: &[usize]) -> Result<&'a [f64]> {
    let r = find(records, name)?;
    match &r.payload {
        Payload::F64(v) if r.dims == dims => Ok(v),
        _ => Err(Error::Checkpoint {
            offset: 0,
            message: format!("{name} has shape {:?}, model expects {dims:?}", r.dims),
        }),
    }
}

fn from_records(records: &[Record]) -> Result<Checkpoint> {
    let config = ExperimentConfig::parse(&text(records, "config")?, "checkpoint config")?;
    let stage = text(records, "stage")?;
    let hierarchy = match records.iter().any(|r| r.name == "hierarchy") {
        true => Some(hierarchy_from_text(&text(records, "hierarchy")?)?),
        false => None,
    };
    let u64s = |name: &str, len: usize| -> Result<Vec<u64>> {
        match &find(records, name)?.payload {
            Payload::U64(v) if v.len() == len => Ok(v.clone()),
            _ => Err(Error::Checkpoint { offset: 0, message: format!("{name} is malformed") }),
        }
    };
    let rng = u64s("rng", 4)?;
    let epochs = u64s("trained_epochs", 1)?[0] as usize;

    let mut model = build_model(&config.model, config.train.seed)?;
    let names: Vec<(String, Vec<usize>)> = model.parameters().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for ((name, dims), t) in names.iter().zip(model.parameters_mut()) {
        t.data_mut().copy_from_slice(floats(records, &format!("param/{name}"), dims)?);
    }
    for (i, s) in model.running_stats_mut().iter_mut().enumerate() {
        let c = s.mean.len();
        s.mean.copy_from_slice(floats(records, &format!("running/{i}/mean"), &[c])?);
        s.var.copy_from_slice(floats(records, &format!("running/{i}/var"), &[c])?);
    }
    let mut masks = Vec::new();
    for (i, layer) in model.prunable_layers().iter().enumerate() {
        let name = format!("mask/{i}");
        match &find(records, &name)?.payload {
            Payload::Bytes(b) if b.len() == layer.out_channels() => masks.push(b.iter().map(|&v| v != 0).collect()),
            _ => return Err(Error::Checkpoint { offset: 0, message: format!("{name} does not match the model") }),
        }
    }
    model.set_pruned(PruneMask::from_layers(masks));
    model.set_trained_epochs(epochs);
    Ok(Checkpoint {
        config,
        model,
        hierarchy,
        rng: RngState {
            seed: rng[0],
            stream: rng[1],
            word_pos: u128::from(rng[2]) | (u128::from(rng[3]) << 64),
        },
        stage,
    })
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    encode(&to_records(ck))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    from_records(&decode(bytes)?)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
