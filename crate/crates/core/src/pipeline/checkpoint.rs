//! Single-file checkpoint: magic, little-endian `u32` version and `u64`
//! header length, a JSON header with a name→offset index, then the
//! concatenated PTNS tensor blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SaliencyModel};
use crate::pipeline::train::TrainConfig;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"PICANETC";
pub const VERSION: u32 = 1;

/// ChaCha stream position, enough to resume the sampler exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position, as a decimal string since it is a `u128`.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub rng: Option<RngState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

pub fn to_bytes<T: Scalar>(model: &SaliencyModel<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for (role, map) in [
        (Role::Param, model.params()),
        (Role::Buffer, model.buffers()),
    ] {
        for (name, t) in map {
            let bytes = t.to_ptns_bytes();
            tensors.push(Entry {
                name: name.clone(),
                role,
                offset: blobs.len() as u64,
                length: bytes.len() as u64,
            });
            blobs.extend_from_slice(&bytes);
        }
    }
    let header = Header {
        config: model.config().clone(),
        dtype: format!("{:?}", T::DTYPE).to_lowercase(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    Ok(out)
}

/// Parses a checkpoint, converting stored tensors to `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(SaliencyModel<T>, CheckpointMeta)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body])?;
    let blobs = &bytes[body..];
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for e in header.tensors {
        let (start, len) = (e.offset as usize, e.length as usize);
        let chunk = start
            .checked_add(len)
            .and_then(|end| blobs.get(start..end))
            .ok_or_else(|| bad(&format!("{} out of range", e.name)))?;
        let t = Tensor::<T>::from_ptns_bytes(chunk)?;
        let map = if e.role == Role::Param {
            &mut params
        } else {
            &mut buffers
        };
        if map.insert(e.name.clone(), t).is_some() {
            return Err(bad(&format!("duplicate tensor {}", e.name)));
        }
    }
    let model = SaliencyModel::from_parts(header.config, params, buffers)?;
    Ok((model, header.meta))
}

pub fn save<T: Scalar>(path: &Path, model: &SaliencyModel<T>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(model, meta)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Element type the tensors of a checkpoint file were written in.
pub fn stored_dtype(path: &Path) -> Result<DType> {
    #[derive(Deserialize)]
    struct Peek {
        dtype: String,
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header = 20usize
        .checked_add(hlen)
        .and_then(|end| bytes.get(20..end))
        .ok_or_else(|| Error::Format("checkpoint: truncated header".into()))?;
    let peek: Peek = serde_json::from_slice(header)?;
    match peek.dtype.as_str() {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Format(format!(
            "checkpoint: unknown dtype {other:?}"
        ))),
    }
}

pub fn load<T: Scalar>(path: &Path) -> Result<(SaliencyModel<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
