//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TGCK"
//! version u32 (currently 1)
//! config  u32 length + GanConfig as JSON
//! generator / discriminator sections, each:
//!   u32 entry count, then per entry:
//!     u32 name length + UTF-8 name
//!     u8  kind: 0 = parameter, 1 = running stats
//!     parameter: u32 ndim, u32 dims..., f32 data
//!     stats:     u8 initialized, u32 channels, f32 means, f32 vars
//! corpus  u32 count, u32 height, u32 width, then per level:
//!   u8 origin (0 human, 1 bootstrapped), u32 round, height*width tile bytes
//! ```
//!
//! Tensor data is stored as `f32`; the in-memory engine computes in `f64`,
//! so saving truncates and the round-trip is bit-exact at the file level.
//! Loading rebuilds the store and verifies it against the embedded config's
//! expected layout.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use thiserror::Error;

use crate::autodiff::{RunningStats, Tensor};
use crate::bootstrap::{CorpusState, Origin};
use crate::level::{LevelGrid, TileId};
use crate::net::{GanConfig, NetworkParams};
use crate::params::{ParamStore, Payload};

const MAGIC: &[u8; 4] = b"TGCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match its embedded config: {0}")]
    Incompatible(String),
}

/// A full training snapshot: both networks plus the corpus they were
/// trained on (the conditioning pool for generation).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkParams,
    pub corpus: CorpusState,
}

pub fn save_to_path(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    save(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_from_path(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    load(&mut r)
}

pub fn save(ckpt: &Checkpoint, w: &mut impl Write) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&ckpt.network.config)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    write_u32(w, config.len() as u32)?;
    w.write_all(&config)?;
    write_store(w, &ckpt.network.generator)?;
    write_store(w, &ckpt.network.discriminator)?;
    write_corpus(w, &ckpt.corpus)?;
    Ok(())
}

pub fn load(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config_len = read_u32(r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config: GanConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;

    let generator = read_store(r)?;
    let discriminator = read_store(r)?;
    let corpus = read_corpus(r)?;

    let network = NetworkParams {
        config,
        generator,
        discriminator,
    };
    verify_layout(&network)?;
    Ok(Checkpoint { network, corpus })
}

/// Checks the loaded stores against the layout a fresh network with the
/// embedded config would have: same names, kinds, and shapes in order.
fn verify_layout(network: &NetworkParams) -> Result<(), CheckpointError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let skeleton = NetworkParams::init(network.config.clone(), &mut rng)
        .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    for (loaded, expected) in [
        (&network.generator, &skeleton.generator),
        (&network.discriminator, &skeleton.discriminator),
    ] {
        if loaded.len() != expected.len() {
            return Err(CheckpointError::Incompatible(format!(
                "expected {} entries, found {}",
                expected.len(),
                loaded.len()
            )));
        }
        for (le, ee) in loaded.entries().iter().zip(expected.entries()) {
            if le.name != ee.name {
                return Err(CheckpointError::Incompatible(format!(
                    "entry {:?} where {:?} was expected",
                    le.name, ee.name
                )));
            }
            let ok = match (&le.payload, &ee.payload) {
                (Payload::Param(a), Payload::Param(b)) => a.shape() == b.shape(),
                (Payload::Stats(a), Payload::Stats(b)) => a.channels() == b.channels(),
                _ => false,
            };
            if !ok {
                return Err(CheckpointError::Incompatible(format!(
                    "entry {:?} has the wrong kind or shape",
                    le.name
                )));
            }
        }
    }
    Ok(())
}

fn write_store(w: &mut impl Write, store: &ParamStore) -> Result<(), CheckpointError> {
    write_u32(w, store.len() as u32)?;
    for entry in store.entries() {
        write_u32(w, entry.name.len() as u32)?;
        w.write_all(entry.name.as_bytes())?;
        match &entry.payload {
            Payload::Param(t) => {
                w.write_all(&[0u8])?;
                write_u32(w, t.shape().len() as u32)?;
                for &d in t.shape() {
                    write_u32(w, d as u32)?;
                }
                write_f32s(w, t.data())?;
            }
            Payload::Stats(s) => {
                w.write_all(&[1u8])?;
                w.write_all(&[u8::from(s.initialized)])?;
                write_u32(w, s.channels() as u32)?;
                write_f32s(w, &s.mean)?;
                write_f32s(w, &s.var)?;
            }
        }
    }
    Ok(())
}

fn read_store(r: &mut impl Read) -> Result<ParamStore, CheckpointError> {
    let count = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt("entry name too long".into()));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("entry name is not UTF-8".into()))?;
        let kind = read_u8(r)?;
        match kind {
            0 => {
                let ndim = read_u32(r)? as usize;
                if ndim > 8 {
                    return Err(CheckpointError::Corrupt("too many dimensions".into()));
                }
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(read_u32(r)? as usize);
                }
                let numel: usize = shape.iter().product();
                let data = read_f32s(r, numel)?;
                let tensor = Tensor::new(shape, data)
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
                store
                    .add_param(&name, tensor)
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            }
            1 => {
                let initialized = read_u8(r)? != 0;
                let channels = read_u32(r)? as usize;
                let mean = read_f32s(r, channels)?;
                let var = read_f32s(r, channels)?;
                let stats = RunningStats {
                    mean,
                    var,
                    initialized,
                };
                store
                    .add_stats(&name, stats)
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            }
            other => {
                return Err(CheckpointError::Corrupt(format!(
                    "unknown entry kind {other}"
                )))
            }
        }
    }
    Ok(store)
}

fn write_corpus(w: &mut impl Write, corpus: &CorpusState) -> Result<(), CheckpointError> {
    write_u32(w, corpus.len() as u32)?;
    write_u32(w, corpus.height() as u32)?;
    write_u32(w, corpus.width() as u32)?;
    for (level, origin) in corpus.levels().iter().zip(corpus.origins()) {
        match origin {
            Origin::Human => {
                w.write_all(&[0u8])?;
                write_u32(w, 0)?;
            }
            Origin::Bootstrapped { round } => {
                w.write_all(&[1u8])?;
                write_u32(w, *round as u32)?;
            }
        }
        let bytes: Vec<u8> = level.cells().iter().map(|t| t.index() as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_corpus(r: &mut impl Read) -> Result<CorpusState, CheckpointError> {
    let count = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    if count == 0 {
        return Err(CheckpointError::Corrupt("empty corpus".into()));
    }
    let mut levels = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for _ in 0..count {
        let tag = read_u8(r)?;
        let round = read_u32(r)? as u64;
        let origin = match tag {
            0 => Origin::Human,
            1 => Origin::Bootstrapped { round },
            other => {
                return Err(CheckpointError::Corrupt(format!(
                    "unknown origin tag {other}"
                )))
            }
        };
        let mut bytes = vec![0u8; h * w];
        r.read_exact(&mut bytes)?;
        let cells: Vec<TileId> = bytes
            .iter()
            .map(|&b| {
                TileId::from_index(b as usize)
                    .ok_or_else(|| CheckpointError::Corrupt(format!("bad tile id {b}")))
            })
            .collect::<Result<_, _>>()?;
        let level =
            LevelGrid::new(h, w, cells).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        levels.push(level);
        origins.push(origin);
    }
    CorpusState::from_parts(levels, origins).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32s(w: &mut impl Write, data: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
