//! Parameter checkpoints: a JSON manifest next to a raw little-endian f32
//! payload.
//!
//! ```text
//! model.json  {"format":"hsiad-params","version":1,"dtype":"f32le","network":{..},"tensors":[..]}
//! model.raw   tensor data back to back, in manifest order
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NetParams, NetworkConfig};
use crate::error::{Error, Result};
use crate::io::HeaderTag;
use crate::scalar::Scalar;

pub const FORMAT: &str = "hsiad-params";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: HeaderTag,
    pub network: NetworkConfig,
    pub tensors: Vec<TensorEntry>,
}

/// `(manifest, payload)` paths for a checkpoint given its stem or either file.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".raw"))
}

pub fn save_checkpoint<T: Scalar>(params: &NetParams<T>, cfg: &NetworkConfig, path: &Path) -> Result<()> {
    let (json_path, raw_path) = checkpoint_paths(path);
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(params.count() * 4);
    for t in params.tensors() {
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            offset: payload.len(),
            len: t.data.len(),
        });
        for &v in t.data {
            payload.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: HeaderTag::F32Le,
        network: cfg.clone(),
        tensors,
    };
    fs::write(&raw_path, payload)?;
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads parameters, widening the stored f32 values to `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(NetworkConfig, NetParams<T>)> {
    let (json_path, raw_path) = checkpoint_paths(path);
    for p in [&json_path, &raw_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let malformed = |reason: String| Error::MalformedHeader {
        path: json_path.clone(),
        reason,
    };
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(&json_path)?).map_err(|e| malformed(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(malformed(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let payload = fs::read(&raw_path)?;
    let cfg = manifest.network;
    let mut params = NetParams::<T>::zeros(&cfg)?;
    let expected_total: usize = params.count();
    let stored_total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if stored_total != expected_total || payload.len() != 4 * stored_total {
        return Err(Error::SizeMismatch {
            expected: expected_total,
            actual: payload.len() / 4,
        });
    }
    let slots = params.tensors_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(malformed(format!(
            "{} tensors listed, network has {}",
            manifest.tensors.len(),
            slots.len()
        )));
    }
    for (slot, entry) in slots.into_iter().zip(&manifest.tensors) {
        if slot.name != entry.name || slot.shape != entry.shape || slot.data.len() != entry.len {
            return Err(malformed(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, slot.name, slot.shape
            )));
        }
        let bytes = payload
            .get(entry.offset..entry.offset + 4 * entry.len)
            .ok_or_else(|| malformed(format!("tensor {} overruns payload", entry.name)))?;
        for (i, (d, b)) in slot.data.iter_mut().zip(bytes.chunks_exact(4)).enumerate() {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    index: entry.offset / 4 + i,
                    value: v as f64,
                });
            }
            *d = T::of(v as f64);
        }
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            channels: 8,
            heads: [2, 4, 8, 4, 2],
            window_partition: 4,
            mlp_ratio: 4,
            input_size: (16, 16, 6),
            zero_residual_start: false,
        }
    }

    #[test]
    fn round_trip_f32_is_exact() {
        let cfg = tiny();
        let p: NetParams<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model");
        save_checkpoint(&p, &cfg, &path).unwrap();
        let (cfg2, q) = load_checkpoint::<f32>(&path.with_extension("json")).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let cfg = tiny();
        let p: NetParams<f64> = NetParams::zeros(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        save_checkpoint(&p, &cfg, &path).unwrap();
        let raw = dir.path().join("m.raw");
        let mut bytes = fs::read(&raw).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&raw, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::SizeMismatch { .. })));
    }
}
