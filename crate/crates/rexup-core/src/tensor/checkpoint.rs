//! Binary checkpoint format for a [`ParamStore`].
//!
//! Layout: magic bytes `RXUP`, format version (u32 LE), header length
//! (u32 LE), header as UTF-8 JSON, then the raw little-endian float
//! payload, row-major. The header lists `(name, shape, dtype, offset)`
//! per entry plus the optimizer step count; offsets are relative to the
//! start of the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::{Error, Result, Scalar};

const MAGIC: &[u8; 4] = b"RXUP";
const FORMAT_VERSION: u32 = 1;

#[cfg(not(feature = "f32"))]
const DTYPE: &str = "f64";
#[cfg(feature = "f32")]
const DTYPE: &str = "f32";

/// Caller-defined JSON carried in the checkpoint header (model config,
/// vocabularies, ...).
pub type CheckpointExtra = serde_json::Value;

#[derive(Serialize, Deserialize)]
struct Header {
    step_count: u64,
    entries: Vec<EntryMeta>,
    #[serde(default)]
    extra: CheckpointExtra,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

pub fn save_checkpoint(store: &ParamStore, extra: CheckpointExtra, path: &Path) -> Result<()> {
    let width = if DTYPE == "f64" { 8 } else { 4 };
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, value) in store.entries() {
        entries.push(EntryMeta {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            dtype: DTYPE.to_string(),
            offset,
        });
        offset += (value.len() * width) as u64;
    }
    let header = Header {
        step_count: store.step_count(),
        entries,
        extra,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, value) in store.entries() {
        for &v in value.data() {
            #[cfg(not(feature = "f32"))]
            w.write_all(&v.to_le_bytes())?;
            #[cfg(feature = "f32")]
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointExtra)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {magic:?} in {}",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    r.read_exact(&mut buf4)?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header parse failed: {e}")))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut store = ParamStore::new();
    for meta in &header.entries {
        let count: usize = meta.shape.iter().product();
        let width = match meta.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown dtype {other} for entry {}",
                    meta.name
                )))
            }
        };
        let start = meta.offset as usize;
        let end = start + count * width;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "entry {} extends past payload end",
                meta.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(width) {
            let v = if width == 8 {
                f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")) as Scalar
            } else {
                f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as Scalar
            };
            data.push(v);
        }
        store.insert(&meta.name, Tensor::from_vec(&meta.shape, data)?)?;
    }
    store.set_step_count(header.step_count);
    Ok((store, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_values_order_and_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rxup");
        let mut store = ParamStore::new();
        store.insert_xavier("b/w", 3, 4, 9).unwrap();
        store.insert_xavier("a/w", 2, 2, 9).unwrap();
        store.set_step_count(17);
        save_checkpoint(&store, json!({"k": 1}), &path).unwrap();

        let (loaded, extra) = load_checkpoint(&path).unwrap();
        assert_eq!(extra["k"], 1);
        assert_eq!(loaded.step_count(), 17);
        let names: Vec<_> = loaded.names().collect();
        assert_eq!(names, vec!["b/w", "a/w"]);
        assert_eq!(loaded.value("b/w").unwrap(), store.value("b/w").unwrap());
        assert_eq!(loaded.value("a/w").unwrap(), store.value("a/w").unwrap());
    }

    #[test]
    fn bad_magic_is_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.rxup");
        std::fs::write(&path, b"NOPE0000").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
