//! Versioned binary container for weights and optimizer state.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "GMFK" | u32 version | u32 entry count
//! per entry: u16 name length | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | data
//! u32 metadata length | metadata (UTF-8 JSON)
//! ```
//!
//! Optimizer moments are stored as ordinary entries under `adam.m.` and
//! `adam.v.`; the step count and model configuration live in the metadata.

use std::io::Write;
use std::path::Path;

use gmflow_tensor::{DType, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"GMFK";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub model: ModelConfig,
    /// Completed training iterations.
    pub iteration: usize,
    /// Optimizer step count, present when moments are stored.
    pub adam_step: Option<u64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Decoded file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub weights: ModelWeights<T>,
    pub adam: Option<AdamState<T>>,
    pub metadata: Metadata,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_state(state: &TrainState<T>) -> Self {
        Self {
            weights: state.weights.clone(),
            adam: Some(state.adam.clone()),
            metadata: Metadata {
                model: state.weights.config,
                iteration: state.iteration,
                adam_step: Some(state.adam.step),
                extra: serde_json::Value::Null,
            },
        }
    }

    pub fn from_weights(weights: &ModelWeights<T>) -> Self {
        Self {
            weights: weights.clone(),
            adam: None,
            metadata: Metadata {
                model: weights.config,
                iteration: 0,
                adam_step: None,
                extra: serde_json::Value::Null,
            },
        }
    }

    /// Training state, if optimizer moments were stored.
    pub fn into_state(self) -> Option<TrainState<T>> {
        let adam = self.adam?;
        Some(TrainState {
            weights: self.weights,
            adam,
            iteration: self.metadata.iteration,
        })
    }
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| FlowError::config(format!("entry name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Serializes a checkpoint to bytes.
pub fn encode<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, &Tensor<T>)> = ckpt.weights.params.iter().map(|(n, t)| (n.clone(), t)).collect();
    if let Some(adam) = &ckpt.adam {
        entries.extend(adam.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
        entries.extend(adam.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        put_tensor(&mut out, name, t)?;
    }
    let meta = serde_json::to_vec(&ckpt.metadata).map_err(|e| FlowError::config(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> FlowError {
        FlowError::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses bytes produced by [`encode`]. Entries of an unknown kind are
/// skipped with a warning; tensors stored in the other precision are cast.
pub fn decode<T: Real>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("entry count")?;
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err("entry name is not UTF-8"))?
            .to_owned();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| r.err(format!("unknown dtype code {code}")))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * dtype.size_in_bytes(), "tensor data")?;
        let data: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| r.err(e.to_string()))?;
        if let Some(rest) = name.strip_prefix(ADAM_M) {
            m.insert(rest, t);
        } else if let Some(rest) = name.strip_prefix(ADAM_V) {
            v.insert(rest, t);
        } else {
            params.insert(name, t);
        }
    }
    let len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(len, "metadata")?;
    let metadata: Metadata = serde_json::from_slice(meta_bytes).map_err(|e| r.err(format!("invalid metadata: {e}")))?;

    // Keep exactly the parameters this configuration uses.
    let template = ModelWeights::<T>::init(metadata.model, 0)?;
    let mut kept = ParamStore::new();
    for (name, t) in template.params.iter() {
        match params.get(name) {
            Some(s) if s.shape() == t.shape() => kept.insert(name.clone(), s.clone()),
            Some(s) => {
                return Err(r.err(format!(
                    "entry `{name}` has shape {:?}, the model expects {:?}",
                    s.shape(),
                    t.shape()
                )))
            }
            None => return Err(r.err(format!("missing entry `{name}`"))),
        }
    }
    for name in params.names().filter(|n| kept.get(n).is_none()) {
        log::warn!("ignoring unknown checkpoint entry `{name}`");
    }
    let adam = match metadata.adam_step {
        Some(step) if m.len() == kept.len() && v.len() == kept.len() => Some(AdamState { step, m, v }),
        Some(_) => return Err(r.err("optimizer state does not cover every parameter")),
        None => None,
    };
    Ok(Checkpoint {
        weights: ModelWeights {
            config: metadata.model,
            params: kept,
        },
        adam,
        metadata,
    })
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| FlowError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| FlowError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| FlowError::io(path, e))?;
    tmp.persist(path).map_err(|e| FlowError::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| FlowError::io(path, e))?;
    decode(&bytes)
}
