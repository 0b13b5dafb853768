//! Versioned binary container for named parameter tensors.
//!
//! Layout (little endian): magic `MRLCKPT1`, format version u32, config
//! hash u64, schedule hash u64, tensor count u32, then per tensor:
//! name length u16 + UTF-8 name, rank u8, dims u32 each, f64 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::{ParameterStore, Tensor};
use crate::error::{MuralError, Result};

const MAGIC: &[u8; 8] = b"MRLCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: u64,
    pub schedule_hash: u64,
}

/// FNV-1a over a canonical description string; used for config/schedule hashes.
pub fn describe_hash(desc: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in desc.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save_store(path: &Path, store: &ParameterStore, meta: CheckpointMeta) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.config_hash.to_le_bytes());
    buf.extend_from_slice(&meta.schedule_hash.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        let t = store.value(id);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<(Vec<(String, Tensor)>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| MuralError::Checkpoint(format!("{}: {reason}", path.display()));
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad("truncated"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let config_hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let schedule_hash = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("invalid tensor name"))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
        }
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok((
        tensors,
        CheckpointMeta {
            config_hash,
            schedule_hash,
        },
    ))
}

/// Load tensors into an existing store; every name and shape must match.
pub fn restore_into(
    store: &mut ParameterStore,
    tensors: Vec<(String, Tensor)>,
    path: &Path,
) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(MuralError::Checkpoint(format!(
            "{}: tensor count {} does not match model {}",
            path.display(),
            tensors.len(),
            store.len()
        )));
    }
    for (name, tensor) in tensors {
        let id = store.lookup(&name).ok_or_else(|| {
            MuralError::Checkpoint(format!("{}: unknown tensor `{name}`", path.display()))
        })?;
        if store.value(id).shape() != tensor.shape() {
            return Err(MuralError::Checkpoint(format!(
                "{}: shape mismatch for `{name}`",
                path.display()
            )));
        }
        *store.value_mut(id) = tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParameterStore::new();
        store.register(
            "a.weight",
            Tensor::from_vec(&[2, 3], vec![0.1, -2.5, 3.25, 1e-300, 0.0, 7.0]).unwrap(),
        );
        store.register("a.bias", Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let meta = CheckpointMeta {
            config_hash: 0xdead,
            schedule_hash: 0xbeef,
        };
        save_store(&path, &store, meta).unwrap();
        let (tensors, meta2) = load_store(&path).unwrap();
        assert_eq!(meta2, meta);

        let mut store2 = ParameterStore::new();
        store2.register("a.weight", Tensor::zeros(&[2, 3]));
        store2.register("a.bias", Tensor::zeros(&[2]));
        restore_into(&mut store2, tensors, &path).unwrap();
        assert_eq!(store2.value_digest(), store.value_digest());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        std::fs::write(&path, b"MRLCKPT1\x01\x00").unwrap();
        assert!(matches!(
            load_store(&path),
            Err(MuralError::Checkpoint(_))
        ));
    }
}
