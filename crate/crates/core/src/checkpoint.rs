//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CPKT" | u32 version | [u8; 32] fingerprint
//! str architecture (JSON) | str schema (JSON) | str vocabulary (JSON) | str metadata (JSON)
//! u64 count | count × (str name, u8 dtype, u32 rank, rank × u64 dim, numel × f64)
//! u8 has_optimizer | [count × (u64 step, numel × f64 m, numel × f64 v)]
//! ```
//!
//! `str` is a u64 byte length followed by UTF-8. Parameters are written in
//! name order, so a store always serialises to the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{FieldSchema, TokenVocabulary};
use crate::error::{CheckpointErrorKind as Kind, Error, Result};
use crate::numeric::{ParamStore, Tensor};
use crate::train::{Architecture, Model, Parts, ALPHA_NAME};

pub const MAGIC: &[u8; 4] = b"CPKT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Run facts stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub mode: String,
    pub step: u64,
    pub val_auc: Option<f64>,
    pub alpha: Option<f64>,
    pub no_prompt: bool,
    pub seed: u64,
}

/// A model together with the dictionaries it was trained against.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub schema: FieldSchema,
    pub vocab: TokenVocabulary,
    pub meta: CheckpointMeta,
}

/// SHA-256 over the canonical `key=value` lines of an architecture.
pub fn fingerprint(arch: &Architecture) -> [u8; 32] {
    let mut h = Sha256::new();
    for (k, v) in arch.canonical() {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().into()
}

/// First canonical key whose value differs between two architectures.
pub fn first_mismatch(a: &Architecture, b: &Architecture) -> Option<(String, String, String)> {
    a.canonical()
        .into_iter()
        .zip(b.canonical())
        .find(|(x, y)| x.1 != y.1)
        .map(|((k, x), (_, y))| (k, x, y))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self, with_optimizer: bool) -> Result<Vec<u8>> {
        let arch = &self.model.arch;
        let store = &self.model.store;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&fingerprint(arch));
        put_str(&mut out, &serde_json::to_string(arch)?);
        put_str(&mut out, &self.schema.to_json()?);
        put_str(&mut out, &self.vocab.to_json()?);
        put_str(&mut out, &serde_json::to_string(&self.meta)?);
        let ids: Vec<_> = store.ids_by_name().collect();
        out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
        for &id in &ids {
            let p = store.get(id);
            put_str(&mut out, &p.name);
            out.push(DTYPE_F64);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.value.data());
        }
        out.push(with_optimizer as u8);
        if with_optimizer {
            for &id in &ids {
                let p = store.get(id);
                out.extend_from_slice(&p.step.to_le_bytes());
                put_f64s(&mut out, p.m.data());
                put_f64s(&mut out, p.v.data());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. With `expected`, the stored architecture must
    /// match it; a mismatch names the first differing key.
    pub fn from_bytes(bytes: &[u8], expected: Option<&Architecture>) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::checkpoint(Kind::Magic, "file too short"))? != MAGIC {
            return Err(Error::checkpoint(Kind::Magic, "not a checkpoint file"));
        }
        let version = r.u32().map_err(|_| Error::checkpoint(Kind::Version, "missing version"))?;
        if version != VERSION {
            return Err(Error::checkpoint(
                Kind::Version,
                format!("format version {version}, this build reads {VERSION}"),
            ));
        }
        let stored_fp: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let arch: Architecture = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::checkpoint(Kind::Parse, format!("architecture: {e}")))?;
        if fingerprint(&arch) != stored_fp {
            return Err(Error::checkpoint(
                Kind::Fingerprint,
                "stored fingerprint does not match the stored architecture",
            ));
        }
        if let Some(want) = expected {
            if let Some((key, have, need)) = first_mismatch(&arch, want) {
                return Err(Error::checkpoint(
                    Kind::Fingerprint,
                    format!("key `{key}` is {have} in the checkpoint but {need} in the config"),
                ));
            }
        }
        let schema = FieldSchema::from_json(&r.string()?)
            .map_err(|e| Error::checkpoint(Kind::Parse, format!("schema: {e}")))?;
        let vocab = TokenVocabulary::from_json(&r.string()?)
            .map_err(|e| Error::checkpoint(Kind::Parse, format!("vocabulary: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::checkpoint(Kind::Parse, format!("metadata: {e}")))?;

        let count = r.u64()? as usize;
        let mut records: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::checkpoint(Kind::Parse, format!("{name}: unknown dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            let data = r.f64s(numel)?;
            if records.last().is_some_and(|(prev, _)| *prev >= name) {
                return Err(Error::checkpoint(Kind::Parse, format!("record `{name}` out of order")));
            }
            records.push((name, Tensor::new(shape, data)?));
        }
        let has_opt = r.u8()?;
        let mut opt_state = Vec::new();
        if has_opt == 1 {
            for (_, t) in &records {
                let step = r.u64()?;
                let m = r.f64s(t.len())?;
                let v = r.f64s(t.len())?;
                opt_state.push((step, m, v));
            }
        } else if has_opt != 0 {
            return Err(Error::checkpoint(Kind::Parse, "bad optimizer flag"));
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint(Kind::Parse, "trailing bytes"));
        }

        let has = |prefix: &str| records.iter().any(|(n, _)| n.starts_with(prefix));
        let parts = if has(ALPHA_NAME) {
            Parts::Fused
        } else if has(crate::plm::PREFIX) {
            Parts::Pretrain
        } else {
            Parts::Ctr
        };
        let mut model = Model::new(&arch, parts, 0, "init/ctr")?;
        model.zero_prompts = meta.no_prompt;
        if model.store.len() != records.len() {
            let missing: Vec<&str> = model
                .store
                .ids_by_name()
                .map(|id| model.store.name(id))
                .filter(|n| !records.iter().any(|(r, _)| r == n))
                .collect();
            return Err(Error::checkpoint(
                Kind::Missing,
                format!(
                    "{} records for a model of {} parameters; missing: {}",
                    records.len(),
                    model.store.len(),
                    missing.join(", ")
                ),
            ));
        }
        for (i, (name, value)) in records.into_iter().enumerate() {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::checkpoint(Kind::Missing, format!("unexpected record `{name}`")))?;
            let want = model.store.value(id).shape();
            if want != value.shape() {
                return Err(Error::checkpoint(
                    Kind::Shape,
                    format!("{name}: stored {:?}, architecture needs {:?}", value.shape(), want),
                ));
            }
            let p = model.store.get_mut(id);
            p.value = value;
            if let Some((step, m, v)) = opt_state.get_mut(i) {
                p.step = *step;
                p.m = Tensor::new(p.value.shape().to_vec(), std::mem::take(m))?;
                p.v = Tensor::new(p.value.shape().to_vec(), std::mem::take(v))?;
            }
        }
        Ok(Checkpoint {
            model,
            schema,
            vocab,
            meta,
        })
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        let bytes = self.to_bytes(with_optimizer)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, expected)
    }
}

/// Parameters of a store as `(name, value)` in name order; handy for
/// comparing two stores bit for bit.
pub fn named_values(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .ids_by_name()
        .map(|id| {
            let bits = store.value(id).data().iter().map(|x| x.to_bits()).collect();
            (store.name(id).to_string(), bits)
        })
        .collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::checkpoint(Kind::Parse, format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::checkpoint(Kind::Parse, "invalid UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::checkpoint(Kind::Parse, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests;
