//! Feature cache files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PPFC1\n"                      6 bytes magic + version
//! n_rows: u32, n_cols: u32
//! model_hash: 32 ASCII hex bytes
//! transform_tag: u8              0 upright, 1 inverted
//! n_rows × (len: u32, UTF-8 id)
//! n_rows × n_cols f32, row-major
//! ```

use std::io::Write;
use std::path::Path;

use super::{BackboneError, FeatureMatrix, Result};
use crate::dataset::Orientation;

pub const MAGIC: &[u8; 6] = b"PPFC1\n";
pub const HEADER_LEN: usize = MAGIC.len() + 4 + 4 + 32 + 1;

fn format_err(path: &Path, message: impl Into<String>) -> BackboneError {
    BackboneError::CacheFormat { path: path.display().to_string(), message: message.into() }
}

pub fn encode(fm: &FeatureMatrix) -> Result<Vec<u8>> {
    let hash = fm.model_hash().as_bytes();
    if hash.len() != 32 {
        return Err(BackboneError::InvalidMatrix(format!(
            "model hash must be 32 hex chars, got `{}`",
            fm.model_hash()
        )));
    }
    let ids_len: usize = fm.record_ids().iter().map(|s| 4 + s.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + ids_len + fm.values().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(fm.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(fm.cols() as u32).to_le_bytes());
    out.extend_from_slice(hash);
    out.push(fm.transform().code());
    for id in fm.record_ids() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in fm.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, "file shorter than the header"));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(path, "bad magic or unsupported cache version"));
    }
    let u32_at = |pos: usize| u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    let rows = u32_at(6);
    let cols = u32_at(10);
    let hash = std::str::from_utf8(&bytes[14..46]).map_err(|_| format_err(path, "model hash is not ASCII"))?;
    let transform = Orientation::from_code(bytes[46]).ok_or_else(|| format_err(path, "unknown transform tag"))?;
    let mut pos = HEADER_LEN;
    let mut ids = Vec::with_capacity(rows);
    for _ in 0..rows {
        if pos + 4 > bytes.len() {
            return Err(format_err(path, "truncated record id table"));
        }
        let len = u32_at(pos);
        pos += 4;
        let raw = bytes.get(pos..pos + len).ok_or_else(|| format_err(path, "truncated record id"))?;
        ids.push(String::from_utf8(raw.to_vec()).map_err(|_| format_err(path, "record id is not UTF-8"))?);
        pos += len;
    }
    let expected =
        rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| format_err(path, "size overflow"))?;
    if bytes.len() - pos != expected {
        return Err(format_err(path, format!("expected {expected} value bytes, found {}", bytes.len() - pos)));
    }
    let values: Vec<f32> = bytes[pos..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    FeatureMatrix::new(cols, values, ids, hash, transform)
}

/// Writes `fm` atomically (temp file + rename).
pub fn cache_write(fm: &FeatureMatrix, path: &Path) -> Result<()> {
    let bytes = encode(fm)?;
    let io = |source| BackboneError::Io { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn cache_read(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|source| BackboneError::Io { path: path.display().to_string(), source })?;
    decode(&bytes, path)
}

/// Reads a cache and rejects it when it was written for another model.
pub fn cache_read_checked(path: &Path, expected_hash: &str) -> Result<FeatureMatrix> {
    let fm = cache_read(path)?;
    if fm.model_hash() != expected_hash {
        return Err(BackboneError::StaleCache {
            path: path.display().to_string(),
            found: fm.model_hash().to_string(),
            expected: expected_hash.to_string(),
        });
    }
    Ok(fm)
}
