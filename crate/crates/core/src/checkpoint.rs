//! Binary tensor container used for training checkpoints and the judge
//! classifier. Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "STGANCKP"
//! version    u32       FORMAT_VERSION
//! header_len u64       byte length of the JSON header
//! header     JSON      {"kind", "meta", "tensors": [{"name", "shape"}, ...]}
//! payload    f32 LE    each tensor's elements, in header order, row-major
//! digest     u64       FNV-1a over every preceding byte
//! ```
//!
//! The checkpoint id is the digest as 16 hex digits; identical contents give
//! identical ids.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stgan_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"STGANCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Decoded container contents.
#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub id: String,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn encode(kind: &str, meta: serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<(Vec<u8>, String)> {
    let header = Header {
        kind: kind.into(),
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(json.len() + 32 + tensors.iter().map(|(_, t)| t.numel() * 4).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a(&buf);
    buf.extend_from_slice(&digest.to_le_bytes());
    Ok((buf, format!("{digest:016x}")))
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let digest = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != digest {
        return Err(bad("digest mismatch; file is truncated or corrupted"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("header overruns file"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut pos = header_end;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = pos + n * 4;
        if end > body.len() {
            return Err(Error::Checkpoint(format!("payload of {} overruns file", entry.name)));
        }
        let data = body[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name, Tensor::new(&entry.shape, data)?));
        pos = end;
    }
    if pos != body.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        tensors,
        id: format!("{digest:016x}"),
    })
}

/// Writes through a temporary file and a rename so readers never see a
/// partial checkpoint.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Copies every tensor named in `store` out of `c`, checking shapes.
pub fn restore_store(c: &Container, store: &mut ParamStore<f32>, prefix: &str) -> Result<()> {
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let t = c.tensor(&format!("{prefix}{name}"))?;
        store
            .set_value(&name, t.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    config: TrainConfig,
    iteration: u64,
    g_adam_step: u64,
    d_adam_step: u64,
    #[serde(default)]
    attribute_names: Vec<String>,
}

pub const TRAINER_KIND: &str = "trainer";

fn push_adam<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, tag: &str, store: &ParamStore<f32>, adam: &'a Adam<f32>) {
    for (p, (m, v)) in store.iter().zip(adam.m.iter().zip(&adam.v)) {
        out.push((format!("adam/{tag}/m/{}", p.name), m));
        out.push((format!("adam/{tag}/v/{}", p.name), v));
    }
}

fn restore_adam(c: &Container, tag: &str, store: &ParamStore<f32>, adam: &mut Adam<f32>, step: u64) -> Result<()> {
    for (i, p) in store.iter().enumerate() {
        for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let t = c.tensor(&format!("adam/{tag}/{kind}/{}", p.name))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!("optimizer state for {} has shape {:?}", p.name, t.shape())));
            }
            *slot = t.clone();
        }
    }
    adam.step = step;
    Ok(())
}

pub fn encode_trainer(t: &Trainer) -> Result<(Vec<u8>, String)> {
    let meta = TrainerMeta {
        config: t.config.clone(),
        iteration: t.iteration,
        g_adam_step: t.g_opt.step,
        d_adam_step: t.d_opt.step,
        attribute_names: t.attribute_names.clone(),
    };
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    tensors.extend(t.gen.params.iter().map(|p| (p.name.clone(), &p.value)));
    tensors.extend(t.disc.params.iter().map(|p| (p.name.clone(), &p.value)));
    push_adam(&mut tensors, "generator", &t.gen.params, &t.g_opt);
    push_adam(&mut tensors, "discriminator", &t.disc.params, &t.d_opt);
    let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    encode(TRAINER_KIND, meta, &tensors)
}

/// Returns the checkpoint id.
pub fn save_trainer(t: &Trainer, path: &Path) -> Result<String> {
    let (bytes, id) = encode_trainer(t)?;
    write_atomic(path, &bytes)?;
    Ok(id)
}

pub fn trainer_from(c: &Container) -> Result<Trainer> {
    if c.kind != TRAINER_KIND {
        return Err(Error::Checkpoint(format!("expected a {TRAINER_KIND} checkpoint, found {:?}", c.kind)));
    }
    let meta: TrainerMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut t = Trainer::new(meta.config)?;
    restore_store(c, &mut t.gen.params, "")?;
    restore_store(c, &mut t.disc.params, "")?;
    restore_adam(c, "generator", &t.gen.params, &mut t.g_opt, meta.g_adam_step)?;
    restore_adam(c, "discriminator", &t.disc.params, &mut t.d_opt, meta.d_adam_step)?;
    t.iteration = meta.iteration;
    t.attribute_names = meta.attribute_names;
    Ok(t)
}

pub fn load_trainer(path: &Path) -> Result<Trainer> {
    trainer_from(&read(path)?)
}
