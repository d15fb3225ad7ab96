// SPDX-License-Identifier: MIT OR Apache-2.0

//! `EMC1` weight files.
//!
//! Layout, little-endian throughout:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `EMC1` |
//! | 4 | `u32` length `n` of the config JSON |
//! | n | canonical JSON of [`ModelConfig`] |
//! | 8·P | every parameter as `f64`, in [`ModelWeights::tensors`] order |
//! | 4 | CRC-32 (IEEE) of all preceding bytes |
//!
//! Order of tensors: token embedding, positional embedding, unembedding,
//! then per layer `ln1_g ln1_b w_q w_k w_v w_o ln2_g ln2_b w_up w_down`,
//! then `lnf_g lnf_b`. Matrices are row-major.

use std::path::Path;

use super::{ModelBundle, ModelConfig, ModelWeights};
use crate::canon;
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"EMC1";

/// Shared framing: magic, length-prefixed JSON header, f64 payload, CRC.
pub(crate) fn frame(magic: &[u8; 4], header: &str, blocks: &[&[f64]]) -> Vec<u8> {
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(12 + header.len() + 8 * total);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for b in blocks {
        for v in b.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Inverse of [`frame`]: returns the header text and the f64 payload.
pub(crate) fn unframe<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(&'a str, Vec<f64>)> {
    if bytes.len() < 12 {
        return Err(Error::Format("file too short".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checksum mismatch".into()));
    }
    let n = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    if 8 + n > body.len() {
        return Err(Error::Format("header length exceeds file".into()));
    }
    let header = std::str::from_utf8(&body[8..8 + n])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let payload = &body[8 + n..];
    if payload.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64".into()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, data))
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let header = canon::to_string(&bundle.config)?;
    Ok(frame(WEIGHT_MAGIC, &header, &bundle.weights.tensors()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let (header, data) = unframe(WEIGHT_MAGIC, bytes)?;
    let config: ModelConfig = serde_json::from_str(header)
        .map_err(|e| Error::Format(format!("config header: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("embedded config invalid: {e}")))?;
    let mut weights = ModelWeights::zeros(&config);
    let need = weights.param_count();
    if data.len() != need {
        return Err(Error::Format(format!(
            "payload holds {} values, config implies {need}",
            data.len()
        )));
    }
    let mut off = 0;
    for t in weights.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&data[off..off + n]);
        off += n;
    }
    ModelBundle::new(config, weights)
}

pub fn save_weights(bundle: &ModelBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(bundle)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelBundle> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelBundle {
        ModelBundle::init_random(ModelConfig::small(2, 2, 8, 16, 24, 3), 5).unwrap()
    }

    #[test]
    fn save_load_resave_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.emc");
        let b = small();
        save_weights(&b, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = load_weights(&p).unwrap();
        assert_eq!(back, b);
        save_weights(&back, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn truncated_and_corrupted_files_fail() {
        let bytes = to_bytes(&small()).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[40] ^= 0x55;
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(Error::Format(_))));
    }

    #[test]
    fn dimension_mismatch_fails() {
        let b = small();
        let header = canon::to_string(&ModelConfig::small(2, 2, 8, 32, 24, 3)).unwrap();
        let bytes = frame(WEIGHT_MAGIC, &header, &b.weights.tensors());
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }
}
