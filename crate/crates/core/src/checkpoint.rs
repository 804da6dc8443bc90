//! Binary checkpoints: magic, version, a JSON header (config, vocabulary,
//! array index, counters, RNG position), a little-endian f64 payload and a
//! trailing SHA-256 over everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dte_autograd::Array;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, TrainConfig};
use crate::data::Vocabulary;
use crate::error::{DteError, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Buffers, Group, ParamStore};
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"DTECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Full training state.
    State,
    /// Parameters with EMA values substituted; no optimizer state.
    Ema,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    Buffer,
    AdamM,
    AdamV,
    Ema,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    section: Section,
    name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    group: Option<Group>,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: TrainConfig,
    config_hash: String,
    model: ModelConfig,
    vocab: Vocabulary,
    groups: BTreeMap<String, Vec<String>>,
    arrays: Vec<Entry>,
    adam_t: BTreeMap<String, u64>,
    epoch: usize,
    batch_in_epoch: usize,
    step: u64,
    rng: Option<RngState>,
}

struct Writer {
    entries: Vec<Entry>,
    payload: Vec<u8>,
    offset: usize,
}

impl Writer {
    fn push(&mut self, section: Section, name: &str, group: Option<Group>, a: &Array) {
        self.entries.push(Entry {
            section,
            name: name.to_owned(),
            group,
            shape: a.shape().to_vec(),
            offset: self.offset,
        });
        for v in a.data() {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.offset += a.numel();
    }
}

fn group_names(store: &ParamStore) -> BTreeMap<String, Vec<String>> {
    Group::ALL
        .iter()
        .map(|g| (g.name().to_owned(), store.names_in(*g)))
        .collect()
}

fn encode(state: &TrainState, kind: CheckpointKind) -> Vec<u8> {
    let mut w = Writer {
        entries: Vec::new(),
        payload: Vec::new(),
        offset: 0,
    };
    let model = match kind {
        CheckpointKind::State => state.model.clone(),
        CheckpointKind::Ema => state.ema_model(),
    };
    for (name, p) in model.store.iter() {
        w.push(Section::Param, name, Some(p.group), &p.value);
    }
    for (name, b) in model.buffers.iter() {
        w.push(Section::Buffer, name, None, b);
    }
    let rng = if kind == CheckpointKind::State {
        for (name, a) in &state.adam_m {
            w.push(Section::AdamM, name, None, a);
        }
        for (name, a) in &state.adam_v {
            w.push(Section::AdamV, name, None, a);
        }
        for (name, a) in &state.ema {
            w.push(Section::Ema, name, None, a);
        }
        Some(RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        })
    } else {
        None
    };
    let header = Header {
        kind,
        config: state.config.clone(),
        config_hash: state.config.hash(),
        model: model.cfg.clone(),
        vocab: state.vocab.clone(),
        groups: group_names(&model.store),
        arrays: w.entries,
        adam_t: state.adam_t.iter().map(|(g, t)| (g.name().to_owned(), *t)).collect(),
        epoch: state.epoch,
        batch_in_epoch: state.batch_in_epoch,
        step: state.step,
        rng,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(24 + json.len() + w.payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DteError::io(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| DteError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DteError::io(path, e))
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state, CheckpointKind::State))
}

pub fn save_ema(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode(state, CheckpointKind::Ema))
}

struct Decoded {
    header: Header,
    arrays: Vec<(Entry, Array)>,
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Decoded> {
    let fail = |reason: String| DteError::Checkpoint {
        path: path.to_owned(),
        reason,
    };
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic or too short)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch (truncated or corrupted file)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(20..20 + hlen)
        .ok_or_else(|| fail("header length exceeds file".into()))?;
    let mut header: Header = serde_json::from_slice(json).map_err(|e| fail(format!("bad header: {e}")))?;
    header.vocab = header.vocab.reindex();
    let payload = &body[20 + hlen..];
    let entries = std::mem::take(&mut header.arrays);
    let mut arrays = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let raw = payload
            .get(start..start + n * 8)
            .ok_or_else(|| fail(format!("array `{}` lies outside the payload", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let a = Array::new(&e.shape, data);
        arrays.push((e, a));
    }
    Ok(Decoded { header, arrays })
}

fn read(path: &Path) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| DteError::io(path, e))?;
    decode(path, &bytes)
}

/// Non-parameter arrays keyed by section and name.
type Sections = IndexMap<Section, IndexMap<String, Array>>;

fn rebuild_model(path: &Path, d: &mut Decoded) -> Result<(Model, Sections)> {
    let mut store = ParamStore::new();
    let mut buffers = Buffers::default();
    let mut rest: Sections = IndexMap::new();
    for (e, a) in d.arrays.drain(..) {
        match e.section {
            Section::Param => {
                let g = e.group.ok_or_else(|| DteError::Checkpoint {
                    path: path.to_owned(),
                    reason: format!("parameter `{}` has no group", e.name),
                })?;
                store.insert(e.name, g, a)?;
            }
            Section::Buffer => buffers.insert(e.name, a),
            s => {
                rest.entry(s).or_default().insert(e.name, a);
            }
        }
    }
    if group_names(&store) != d.header.groups {
        return Err(DteError::Checkpoint {
            path: path.to_owned(),
            reason: "parameter groups disagree with the header".into(),
        });
    }
    Ok((
        Model {
            cfg: d.header.model.clone(),
            store,
            buffers,
        },
        rest,
    ))
}

fn parse_rng(path: &Path, r: &RngState) -> Result<ChaCha8Rng> {
    let fail = || DteError::Checkpoint {
        path: path.to_owned(),
        reason: "malformed RNG state".into(),
    };
    if r.seed.len() != 64 {
        return Err(fail());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&r.seed[2 * i..2 * i + 2], 16).map_err(|_| fail())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.stream);
    rng.set_word_pos(r.word_pos.parse().map_err(|_| fail())?);
    Ok(rng)
}

/// Loads a full training state. When `expected_hash` is given the stored
/// config hash must match it.
pub fn load_state(path: &Path, expected_hash: Option<&str>) -> Result<TrainState> {
    let mut d = read(path)?;
    if d.header.kind != CheckpointKind::State {
        return Err(DteError::Checkpoint {
            path: path.to_owned(),
            reason: "EMA checkpoint has no optimizer state; cannot resume from it".into(),
        });
    }
    if let Some(h) = expected_hash {
        if h != d.header.config_hash {
            return Err(DteError::Checkpoint {
                path: path.to_owned(),
                reason: format!("config hash {} does not match expected {h}", d.header.config_hash),
            });
        }
    }
    let (model, mut rest) = rebuild_model(path, &mut d)?;
    let h = d.header;
    let rng = parse_rng(
        path,
        h.rng.as_ref().ok_or_else(|| DteError::Checkpoint {
            path: path.to_owned(),
            reason: "missing RNG state".into(),
        })?,
    )?;
    let mut adam_t = BTreeMap::new();
    for (k, v) in h.adam_t {
        let g = Group::from_name(&k).ok_or_else(|| DteError::Checkpoint {
            path: path.to_owned(),
            reason: format!("unknown group `{k}`"),
        })?;
        adam_t.insert(g, v);
    }
    Ok(TrainState {
        config: h.config,
        vocab: h.vocab,
        model,
        adam_m: rest.shift_remove(&Section::AdamM).unwrap_or_default(),
        adam_v: rest.shift_remove(&Section::AdamV).unwrap_or_default(),
        adam_t,
        ema: rest.shift_remove(&Section::Ema).unwrap_or_default(),
        epoch: h.epoch,
        batch_in_epoch: h.batch_in_epoch,
        step: h.step,
        rng,
    })
}

/// Sampling model from either checkpoint kind; full states contribute their
/// EMA weights.
pub fn load_model(path: &Path) -> Result<(TrainConfig, Vocabulary, Model)> {
    let bytes = fs::read(path).map_err(|e| DteError::io(path, e))?;
    let mut d = decode(path, &bytes)?;
    match d.header.kind {
        CheckpointKind::Ema => {
            let (model, _) = rebuild_model(path, &mut d)?;
            Ok((d.header.config, d.header.vocab, model))
        }
        CheckpointKind::State => {
            let s = load_state(path, None)?;
            let m = s.ema_model();
            Ok((s.config, s.vocab, m))
        }
    }
}
