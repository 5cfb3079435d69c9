//! Versioned binary checkpoint format shared by every persisted state.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic "FLCK" | version u32 | kind_len u16 | kind utf8
//! | config_len u64 | config utf8 (JSON)
//! | record_count u64
//! | records: name_len u16 | name utf8 | ndim u8 | dims u64 x ndim
//!            | byte_len u64 | data f32 LE
//! | sha256 over every byte after the magic (32 bytes)
//! ```
//!
//! The trailing digest covers config and tensor data, so truncation and
//! corruption are both detected; loading recomputes and compares it. Version
//! mismatches are hard errors, never silent migrations.

use crate::tensor::Arr;
use crate::{Error, Result};
use ndarray::IxDyn;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FLCK";
pub const VERSION: u32 = 1;

/// Parsed checkpoint header.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub kind: String,
    pub version: u32,
    pub config_json: String,
    /// Hex digest over the full payload; identifies this exact checkpoint.
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize a checkpoint to bytes. Tensor iteration order is the map order,
/// so identical contents produce identical bytes.
pub fn to_bytes(kind: &str, config_json: &str, tensors: &BTreeMap<String, Arr>) -> Result<Vec<u8>> {
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(&VERSION.to_le_bytes());
    let kind_b = kind.as_bytes();
    body.extend_from_slice(&(kind_b.len() as u16).to_le_bytes());
    body.extend_from_slice(kind_b);
    let cfg_b = config_json.as_bytes();
    body.extend_from_slice(&(cfg_b.len() as u64).to_le_bytes());
    body.extend_from_slice(cfg_b);
    body.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, arr) in tensors {
        if !arr.iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition(format!("tensor {name} contains non-finite values")));
        }
        let name_b = name.as_bytes();
        body.extend_from_slice(&(name_b.len() as u16).to_le_bytes());
        body.extend_from_slice(name_b);
        body.push(arr.ndim() as u8);
        for d in arr.shape() {
            body.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        body.extend_from_slice(&((arr.len() * 4) as u64).to_le_bytes());
        for v in arr.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    let mut out = Vec::with_capacity(4 + body.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "unexpected end of data at offset {} (wanted {n} bytes)",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::CorruptCheckpoint(format!("invalid utf8: {e}")))
    }
}

/// Parse checkpoint bytes, verifying magic, version and digest.
pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointMeta, BTreeMap<String, Arr>)> {
    if bytes.len() < 4 + 32 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing or short magic header".into()));
    }
    let body = &bytes[4..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::CorruptCheckpoint("payload digest mismatch".into()));
    }
    let mut cur = Cursor { data: body, pos: 0 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let kind_len = cur.u16()? as usize;
    let kind = cur.string(kind_len)?;
    let cfg_len = cur.u64()? as usize;
    let config_json = cur.string(cfg_len)?;
    let n_records = cur.u64()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_records {
        let name_len = cur.u16()? as usize;
        let name = cur.string(name_len)?;
        let ndim = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()? as usize);
        }
        let byte_len = cur.u64()? as usize;
        let expected: usize = dims.iter().product::<usize>() * 4;
        if byte_len != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name}: byte length {byte_len} does not match shape {dims:?}"
            )));
        }
        let raw = cur.take(byte_len)?;
        let mut values = Vec::with_capacity(byte_len / 4);
        for chunk in raw.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let arr = Arr::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::CorruptCheckpoint(format!("tensor {name}: {e}")))?;
        tensors.insert(name, arr);
    }
    if cur.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after records".into()));
    }
    let meta = CheckpointMeta {
        kind,
        version,
        config_json,
        digest: stored.iter().map(|b| format!("{b:02x}")).collect(),
    };
    Ok((meta, tensors))
}

/// Write a checkpoint file; returns its digest.
pub fn save(path: &Path, kind: &str, config_json: &str, tensors: &BTreeMap<String, Arr>) -> Result<String> {
    let bytes = to_bytes(kind, config_json, tensors)?;
    let digest = bytes[bytes.len() - 32..].iter().map(|b| format!("{b:02x}")).collect();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(digest)
}

/// Read a checkpoint file.
pub fn load(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Arr>)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn sample_tensors() -> BTreeMap<String, Arr> {
        let mut t = BTreeMap::new();
        t.insert("a.w".to_string(), ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f32));
        t.insert("b".to_string(), ArrayD::from_elem(IxDyn(&[4]), 0.25f32));
        t
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = sample_tensors();
        let bytes = to_bytes("test", "{\"x\":1}", &t).unwrap();
        let (meta, back) = from_bytes(&bytes).unwrap();
        assert_eq!(meta.kind, "test");
        assert_eq!(meta.config_json, "{\"x\":1}");
        assert_eq!(back, t);
        // save -> load -> save produces byte-identical files
        let again = to_bytes("test", "{\"x\":1}", &back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncation_is_detected() {
        let t = sample_tensors();
        let bytes = to_bytes("test", "{}", &t).unwrap();
        for cut in [3, bytes.len() / 2, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut at {cut} not detected");
        }
    }

    #[test]
    fn corruption_is_detected() {
        let t = sample_tensors();
        let mut bytes = to_bytes("test", "{}", &t).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let t = sample_tensors();
        let mut bytes = to_bytes("test", "{}", &t).unwrap();
        // bump the version field and rewrite the digest
        bytes[4] = 99;
        let body_end = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[4..body_end]);
        bytes[body_end..].copy_from_slice(&digest);
        assert!(matches!(from_bytes(&bytes), Err(Error::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn non_finite_tensors_refused() {
        let mut t = BTreeMap::new();
        t.insert("bad".to_string(), ArrayD::from_elem(IxDyn(&[2]), f32::NAN));
        assert!(to_bytes("test", "{}", &t).is_err());
    }
}
