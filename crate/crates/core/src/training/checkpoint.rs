//! `PPCK` checkpoint container.
//!
//! ```text
//! magic    "PPCK"
//! version  u32                      (= 1)
//! arrays   u32 count, then per array:
//!            name  u32 length + UTF-8
//!            rank  u32, dims u64 × rank
//!            data  f64 × Π dims
//! metadata u32 count, then per entry:
//!            key   u32 length + UTF-8
//!            value u32 length + UTF-8
//! ```
//! Little-endian throughout. Arrays and metadata are written in name order,
//! so equal checkpoints encode to equal bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::poolcore::{AddOn, ClassifierHead, ModelConfig, PrototypePool, ProtoPoolModel, SlotBank, SlotRelaxation};

pub const MAGIC: &[u8; 4] = b"PPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic at byte 0")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint at byte {offset}")]
    Truncated { offset: usize },
    #[error("{extra} trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("missing {0}")]
    Missing(String),
    #[error("bad metadata value for {key}: {value}")]
    BadValue { key: String, value: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Training phase a checkpoint was taken in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Phase {
    #[default]
    Init,
    Warmup,
    Joint,
    Projection,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
            Phase::Projection => "projection",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "init" => Phase::Init,
            "warmup" => Phase::Warmup,
            "joint" => Phase::Joint,
            "projection" => Phase::Projection,
            "finetune" => Phase::Finetune,
            other => return Err(format!("unknown phase '{other}'")),
        })
    }
}

/// Position of a `ChaCha8Rng` stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Model parameters plus the training state needed to resume or audit a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ProtoPoolModel,
    pub phase: Phase,
    pub epoch: u32,
    pub rng: Option<RngState>,
    /// Free-form entries (schedule settings and the like). Keys starting with
    /// `model.` or `state.` are reserved.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: ProtoPoolModel) -> Self {
        Self {
            model,
            phase: Phase::Init,
            epoch: 0,
            rng: None,
            meta: BTreeMap::new(),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let cfg = &m.config;
    let mut arrays: BTreeMap<&str, (Vec<u64>, &[f64])> = BTreeMap::new();
    if let Some(a) = &m.addon {
        arrays.insert("addon", (vec![a.in_depth() as u64, a.out_depth() as u64], a.weights()));
    }
    arrays.insert("head", (vec![(cfg.classes * cfg.slots) as u64, cfg.classes as u64], m.head.weights()));
    arrays.insert("pool", (vec![cfg.prototypes as u64, cfg.depth as u64], m.pool.data()));
    arrays.insert(
        "slot_logits",
        (vec![cfg.classes as u64, cfg.slots as u64, cfg.prototypes as u64], m.slots.logits()),
    );

    let mut meta = ck.meta.clone();
    meta.retain(|k, _| !k.starts_with("model.") && !k.starts_with("state."));
    let mut set = |k: &str, v: String| {
        meta.insert(k.to_string(), v);
    };
    set("model.classes", cfg.classes.to_string());
    set("model.slots", cfg.slots.to_string());
    set("model.prototypes", cfg.prototypes.to_string());
    set("model.depth", cfg.depth.to_string());
    set("model.input_depth", cfg.input_depth.to_string());
    set("model.epsilon", cfg.epsilon.to_string());
    set("model.gumbel", cfg.relaxation.to_string());
    set("model.focal", cfg.focal.to_string());
    set("model.addon", cfg.addon.to_string());
    set("state.tau", m.slots.tau.to_string());
    set("state.noise_enabled", m.slots.noise_enabled.to_string());
    set("state.phase", ck.phase.to_string());
    set("state.epoch", ck.epoch.to_string());
    if let Some(r) = &ck.rng {
        set("state.rng_seed", hex(&r.seed));
        set("state.rng_stream", r.stream.to_string());
        set("state.rng_word_pos", r.word_pos.to_string());
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, (dims, data)) in &arrays {
        put_str(&mut out, name);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in &meta {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed {
            offset: at,
            reason: "invalid UTF-8".into(),
        })
    }
}

fn parse<T: FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T, CheckpointError> {
    let v = meta.get(key).ok_or_else(|| CheckpointError::Missing(key.to_string()))?;
    v.parse().map_err(|_| CheckpointError::BadValue {
        key: key.to_string(),
        value: v.clone(),
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let n_arrays = cur.u32()?;
    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_arrays {
        let at = cur.pos;
        let name = cur.string()?;
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed {
                offset: at,
                reason: format!("rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()? as usize);
        }
        let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Malformed {
            offset: at,
            reason: "array size overflows".into(),
        })?;
        let raw = cur.take(len.checked_mul(8).ok_or(CheckpointError::Truncated { offset: bytes.len() })?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if arrays.insert(name.clone(), (dims, data)).is_some() {
            return Err(CheckpointError::Malformed {
                offset: at,
                reason: format!("duplicate array {name}"),
            });
        }
    }
    let n_meta = cur.u32()?;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = cur.string()?;
        let v = cur.string()?;
        meta.insert(k, v);
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes {
            offset: cur.pos,
            extra: bytes.len() - cur.pos,
        });
    }

    let relaxation: SlotRelaxation = parse(&meta, "model.gumbel")?;
    let config = ModelConfig {
        classes: parse(&meta, "model.classes")?,
        slots: parse(&meta, "model.slots")?,
        prototypes: parse(&meta, "model.prototypes")?,
        depth: parse(&meta, "model.depth")?,
        input_depth: parse(&meta, "model.input_depth")?,
        epsilon: parse(&meta, "model.epsilon")?,
        relaxation,
        focal: parse(&meta, "model.focal")?,
        addon: parse(&meta, "model.addon")?,
    };
    let invalid = |e: crate::poolcore::ModelError| CheckpointError::Malformed {
        offset: 0,
        reason: e.to_string(),
    };
    config.validate().map_err(invalid)?;
    let mut take = |name: &str, want: Vec<usize>| -> Result<Vec<f64>, CheckpointError> {
        let (dims, data) = arrays.remove(name).ok_or_else(|| CheckpointError::Missing(format!("array {name}")))?;
        if dims != want {
            return Err(CheckpointError::Malformed {
                offset: 0,
                reason: format!("array {name} has shape {dims:?}, expected {want:?}"),
            });
        }
        Ok(data)
    };
    let (c, k, m, d) = (config.classes, config.slots, config.prototypes, config.depth);
    let addon = if config.addon {
        Some(AddOn::new(config.input_depth, d, take("addon", vec![config.input_depth, d])?).map_err(invalid)?)
    } else {
        None
    };
    let pool = PrototypePool::new(m, d, take("pool", vec![m, d])?).map_err(invalid)?;
    let mut slots = SlotBank::new(c, k, m, take("slot_logits", vec![c, k, m])?).map_err(invalid)?;
    slots.tau = parse(&meta, "state.tau")?;
    slots.noise_enabled = parse(&meta, "state.noise_enabled")?;
    let head = ClassifierHead::from_weights(c, k, take("head", vec![c * k, c])?).map_err(invalid)?;
    if let Some(name) = arrays.keys().next() {
        return Err(CheckpointError::Malformed {
            offset: 0,
            reason: format!("unexpected array {name}"),
        });
    }

    let phase = meta
        .get("state.phase")
        .ok_or_else(|| CheckpointError::Missing("state.phase".into()))?
        .parse()
        .map_err(|e: String| CheckpointError::BadValue {
            key: "state.phase".into(),
            value: e,
        })?;
    let epoch = parse(&meta, "state.epoch")?;
    let rng = match meta.get("state.rng_seed") {
        Some(s) => {
            let seed: [u8; 32] = unhex(s).and_then(|v| v.try_into().ok()).ok_or_else(|| CheckpointError::BadValue {
                key: "state.rng_seed".into(),
                value: s.clone(),
            })?;
            Some(RngState {
                seed,
                stream: parse(&meta, "state.rng_stream")?,
                word_pos: parse(&meta, "state.rng_word_pos")?,
            })
        }
        None => None,
    };
    meta.retain(|k, _| !k.starts_with("model.") && !k.starts_with("state."));
    Ok(Checkpoint {
        model: ProtoPoolModel {
            config,
            addon,
            pool,
            slots,
            head,
        },
        phase,
        epoch,
        rng,
        meta,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample(addon: bool) -> Checkpoint {
        let mut cfg = ModelConfig::new(3, 2, 5, 4);
        cfg.addon = addon;
        cfg.input_depth = if addon { 6 } else { 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = ProtoPoolModel::init(cfg, &mut rng).unwrap();
        model.slots.tau = 0.0123;
        let mut ck = Checkpoint::new(model);
        ck.phase = Phase::Joint;
        ck.epoch = 17;
        rng.next_u32();
        ck.rng = Some(RngState::capture(&rng));
        ck.meta.insert("schedule.alpha".into(), "34000".into());
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        for addon in [true, false] {
            let ck = sample(addon);
            let bytes = encode_checkpoint(&ck);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode_checkpoint(&sample(true));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert_eq!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic));
        let mut extra = bytes;
        extra.push(1);
        assert!(matches!(decode_checkpoint(&extra), Err(CheckpointError::TrailingBytes { extra: 1, .. })));
    }
}
