//! Flat checkpoint container.
//!
//! Layout: a UTF-8 text header listing format version and a
//! name/shape/offset table, terminated by an `END` line, followed by the
//! little-endian f32 payloads back to back. Round-trips are bit-exact.
//!
//! ```text
//! LOOPFORMER-CKPT v1
//! tensors 3
//! embed.table 2 64 32 0 2048
//! core.attn.w_q 2 32 32 8192 1024
//! ...
//! END
//! <raw little-endian f32 bytes>
//! ```
//!
//! Table columns: name, ndims, dims..., byte offset into the payload,
//! element count.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

const MAGIC: &str = "LOOPFORMER-CKPT v1";

/// Serialize the store into the checkpoint byte format.
pub fn to_bytes(store: &ParameterStore) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("tensors {}\n", store.len()));
    let mut offset = 0usize;
    for (_, name, t) in store.iter() {
        header.push_str(name);
        header.push_str(&format!(" {}", t.shape().len()));
        for d in t.shape() {
            header.push_str(&format!(" {d}"));
        }
        header.push_str(&format!(" {} {}\n", offset, t.numel()));
        offset += t.numel() * 4;
    }
    header.push_str("END\n");

    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse checkpoint bytes back into a store. Parameter order follows the
/// header table, so a round-trip preserves canonical order.
pub fn from_bytes(bytes: &[u8]) -> Result<ParameterStore> {
    let header_end = find_header_end(bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| Error::Checkpoint(format!("header is not UTF-8: {e}")))?;
    let payload = &bytes[header_end..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic `{magic}`")));
    }
    let count_line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("missing tensor count".into()))?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad count line `{count_line}`")))?;

    let mut store = ParameterStore::new();
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("truncated table".into()))?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| Error::Checkpoint("empty table line".into()))?;
        let ndims: usize = parse_field(parts.next(), "ndims")?;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(parse_field(parts.next(), "dim")?);
        }
        let offset: usize = parse_field(parts.next(), "offset")?;
        let numel: usize = parse_field(parts.next(), "numel")?;
        if shape.iter().product::<usize>() != numel {
            return Err(Error::Checkpoint(format!(
                "`{name}`: shape {shape:?} does not match numel {numel}"
            )));
        }
        let byte_end = offset + numel * 4;
        if byte_end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "`{name}`: payload slice {offset}..{byte_end} out of range ({} bytes)",
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[offset..byte_end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    match lines.next() {
        Some("END") => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "expected END terminator, got {other:?}"
            )))
        }
    }
    Ok(store)
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<T> {
    field
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad or missing {what} field")))
}

/// Byte offset just past the `END\n` line.
fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let needle = b"\nEND\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + needle.len())
        .ok_or_else(|| Error::Checkpoint("missing END terminator".into()))
}

/// Write atomically: temp file in the same directory, then rename.
pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    atomic_write(path, &to_bytes(store))
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Atomic file write used by every artifact producer in the workspace.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into())
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add(
            "w",
            Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, f32::MIN_POSITIVE, 3.4e38, -1e-30])
                .unwrap(),
        );
        s.add("b", Tensor::new(vec![2], vec![0.125, -0.0]).unwrap());
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let store = sample_store();
        let bytes = to_bytes(&store);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(store.to_bytes(), back.to_bytes());
        assert_eq!(back.get(back.id_of("w").unwrap()).shape(), &[2, 3]);
        // -0.0 must survive with its sign bit
        let b = back.get(back.id_of("b").unwrap());
        assert_eq!(b.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = to_bytes(&sample_store());
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = to_bytes(&sample_store());
        assert!(from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn save_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        save(&store, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(store.to_bytes(), back.to_bytes());
    }
}
