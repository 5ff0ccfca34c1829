//! Single-file checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "MPCKPT01"
//! len      u64       length of the manifest in bytes
//! manifest JSON      { format_version, meta, tensors: [{name, shape, offset}], payload_sha256 }
//! payload  f32 LE    tensors concatenated in manifest order
//! trailer  32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Loading verifies the trailer before parsing anything, so a truncated or
//! bit-flipped file never yields partial weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::weights::{NetworkWeights, Params, WeightsMeta};

const MAGIC: &[u8; 8] = b"MPCKPT01";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    meta: WeightsMeta,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: usize,
}

pub fn encode_checkpoint(w: &NetworkWeights) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(w.params.len());
    let mut offset = 0;
    for (name, t) in &w.params {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta: w.meta.clone(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + 8 + manifest.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkWeights> {
    if bytes.len() < 8 + 8 + 32 {
        return Err(Error::Corruption(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Corruption("trailing digest does not match file contents".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Corruption("manifest length exceeds file size".into()))?;
    let manifest: Manifest = serde_json::from_slice(&body[16..manifest_end])
        .map_err(|e| Error::Format(format!("manifest does not parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    let payload = &body[manifest_end..];
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Corruption("payload digest mismatch".into()));
    }
    let mut params = Params::new();
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 4;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(Error::Corruption(format!("tensor `{}` extends past the payload", entry.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if params.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{}`", entry.name)));
        }
    }
    Ok(NetworkWeights { params, meta: manifest.meta })
}

pub fn save_checkpoint(w: &NetworkWeights, path: &Path) -> Result<String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = encode_checkpoint(w);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(digest_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// SHA-256 of checkpoint bytes, as recorded in provenance.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_hex(&bytes))
}

/// Name of the matching tensor in a torchvision-style ResNet-50 state dict.
/// Documents the mapping a converter must apply to import third-party
/// ImageNet weights; the classifier (`fc.*`) has no counterpart.
pub fn torchvision_resnet50_name(canonical: &str) -> Option<String> {
    let rest = canonical.strip_prefix("encoder.")?;
    let (module, leaf) = rest.rsplit_once('.')?;
    let leaf = match leaf {
        "scale" => "weight",
        "shift" => "bias",
        other => other,
    };
    if let Some(layer) = module.strip_prefix("stem.block0.") {
        let tv = match layer {
            "conv" => "conv1",
            "bn" => "bn1",
            _ => return None,
        };
        return Some(format!("{tv}.{leaf}"));
    }
    let mut parts = module.split('.');
    let (layer, block, unit) = (parts.next()?, parts.next()?, parts.next()?);
    let block = block.strip_prefix("block")?;
    let unit = match unit {
        "downsample" => "downsample.0".to_string(),
        "downsample_bn" => "downsample.1".to_string(),
        u => u.to_string(),
    };
    Some(format!("{layer}.{block}.{unit}.{leaf}"))
}
