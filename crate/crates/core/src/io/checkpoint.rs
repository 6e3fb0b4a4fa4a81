//! "VCKP" checkpoint format: magic, version u8, entry count u32 LE, then
//! per entry a u32 LE name length, UTF-8 name, and an embedded VTEN body.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::tensor_file::{atomic_write, decode_tensor, encode_tensor, DType};
use crate::model::ParameterStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn encode_checkpoint(entries: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_tensor(tensor, DType::F64)?);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<Vec<(String, Tensor)>> {
    let fail = |detail: String| Error::Format {
        path: path.to_string(),
        detail,
    };
    if bytes.len() < 9 {
        return Err(fail("truncated header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {}", bytes[4])));
    }
    let mut count_buf = [0u8; 4];
    count_buf.copy_from_slice(&bytes[5..9]);
    let count = u32::from_le_bytes(count_buf) as usize;
    let mut rest = &bytes[9..];
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        if rest.len() < 4 {
            return Err(fail("truncated entry header".into()));
        }
        let mut len_buf = [0u8; 4];
        len_buf.copy_from_slice(&rest[..4]);
        let name_len = u32::from_le_bytes(len_buf) as usize;
        rest = &rest[4..];
        if rest.len() < name_len {
            return Err(fail("truncated entry name".into()));
        }
        let name = std::str::from_utf8(&rest[..name_len])
            .map_err(|e| fail(format!("entry name not UTF-8: {e}")))?
            .to_string();
        rest = &rest[name_len..];
        let (tensor, _, remaining) = decode_tensor(rest, path)?;
        rest = remaining;
        entries.push((name, tensor));
    }
    if !rest.is_empty() {
        return Err(fail(format!("{} trailing bytes", rest.len())));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in &entries {
        if !seen.insert(name.clone()) {
            return Err(fail(format!("duplicate entry {name}")));
        }
    }
    Ok(entries)
}

/// Saves every parameter (store iteration order) as f64.
pub fn save_params(path: &Path, store: &ParameterStore) -> Result<()> {
    let entries: Vec<(String, &Tensor)> = store
        .iter()
        .map(|(name, p)| (name.clone(), &p.tensor))
        .collect();
    atomic_write(path, &encode_checkpoint(&entries)?)
}

/// Loads a checkpoint into an existing store with matching names/shapes
/// (usually a freshly initialized one).
pub fn load_params(path: &Path, store: &mut ParameterStore) -> Result<()> {
    let bytes = fs::read(path)?;
    let display = path.display().to_string();
    let entries = decode_checkpoint(&bytes, &display)?;
    if entries.len() != store.len() {
        return Err(Error::Format {
            path: display,
            detail: format!("{} entries, model expects {}", entries.len(), store.len()),
        });
    }
    for (name, tensor) in entries {
        if !store.contains(&name) {
            return Err(Error::Format {
                path: display,
                detail: format!("unexpected entry {name}"),
            });
        }
        if store.tensor(&name).shape() != tensor.shape() {
            return Err(Error::Format {
                path: display,
                detail: format!(
                    "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    tensor.shape(),
                    store.tensor(&name).shape()
                ),
            });
        }
        *store.tensor_mut(&name) = tensor;
    }
    Ok(())
}
