//! Network checkpoints: a `key=value` manifest next to a raw little-endian f32 blob.
//!
//! Blob order: layer-norm scale then shift (when present), then for each dense
//! layer its row-major weight followed by its bias.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::net::{Dense, DenseNet, LayerNorm};
use crate::error::{MhsaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub role: String,
    pub dims: Vec<usize>,
    pub layernorm: bool,
    pub seed: u64,
    pub param_count: usize,
    pub sha256: String,
}

/// Serializes all parameters as consecutive f32 little-endian values.
pub fn to_blob(net: &DenseNet) -> Vec<u8> {
    let mut out = Vec::with_capacity(net.param_count() * 4);
    for slice in net.param_slices() {
        for &v in slice {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("manifest"), stem.with_extension("bin"))
}

/// Writes `<stem>.manifest` and `<stem>.bin`. Returns the manifest metadata.
pub fn save(net: &DenseNet, stem: &Path, role: &str, seed: u64) -> Result<CheckpointMeta> {
    let blob = to_blob(net);
    let meta = CheckpointMeta {
        role: role.to_string(),
        dims: net.dims().to_vec(),
        layernorm: net.has_layernorm(),
        seed,
        param_count: net.param_count(),
        sha256: sha256_hex(&blob),
    };
    let (manifest_path, blob_path) = paths(stem);
    let blob_name = blob_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dims: Vec<String> = meta.dims.iter().map(|d| d.to_string()).collect();
    let manifest = format!(
        "role={}\narch={}\nlayernorm={}\nseed={}\nparam_count={}\nsha256={}\nblob={}\n",
        meta.role,
        dims.join(","),
        meta.layernorm,
        meta.seed,
        meta.param_count,
        meta.sha256,
        blob_name
    );
    fs::write(&blob_path, &blob)?;
    fs::write(&manifest_path, manifest)?;
    Ok(meta)
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| MhsaError::Format(format!("manifest line `{line}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Loads a checkpoint from `<stem>.manifest`, verifying the blob digest.
pub fn load(stem: &Path) -> Result<(DenseNet, CheckpointMeta)> {
    let (manifest_path, blob_path) = paths(stem);
    let map = parse_manifest(&fs::read_to_string(&manifest_path)?)?;
    let get = |k: &str| {
        map.get(k)
            .cloned()
            .ok_or_else(|| MhsaError::Format(format!("manifest missing `{k}`")))
    };
    let bad = |k: &str| MhsaError::Format(format!("manifest field `{k}` is malformed"));
    let dims: Vec<usize> = get("arch")?
        .split(',')
        .map(|d| d.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad("arch"))?;
    let layernorm: bool = get("layernorm")?.parse().map_err(|_| bad("layernorm"))?;
    let meta = CheckpointMeta {
        role: get("role")?,
        layernorm,
        seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        param_count: get("param_count")?
            .parse()
            .map_err(|_| bad("param_count"))?,
        sha256: get("sha256")?,
        dims,
    };
    let blob = fs::read(&blob_path)?;
    if sha256_hex(&blob) != meta.sha256 {
        return Err(MhsaError::Format(format!(
            "checkpoint blob {} does not match its manifest digest",
            blob_path.display()
        )));
    }
    let net = from_blob(&meta.dims, meta.layernorm, &blob)?;
    if net.param_count() != meta.param_count {
        return Err(bad("param_count"));
    }
    Ok((net, meta))
}

/// Rebuilds a network from a parameter blob.
pub fn from_blob(dims: &[usize], layernorm: bool, blob: &[u8]) -> Result<DenseNet> {
    let template = DenseNet::zeros(dims, layernorm)?;
    if blob.len() != template.param_count() * 4 {
        return Err(MhsaError::Format(format!(
            "blob has {} bytes, expected {}",
            blob.len(),
            template.param_count() * 4
        )));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let norm = layernorm.then(|| LayerNorm {
        scale: take(dims[0]),
        shift: take(dims[0]),
    });
    let layers = dims
        .windows(2)
        .map(|w| Dense {
            in_dim: w[0],
            out_dim: w[1],
            weight: take(w[0] * w[1]),
            bias: take(w[1]),
        })
        .collect();
    DenseNet::from_parts(norm, layers)
}
