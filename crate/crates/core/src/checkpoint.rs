//! Parameter checkpoint files.
//!
//! Layout: 8-byte magic, u64 little-endian index length, JSON index, then
//! all parameter values as little-endian f64 in index order. Offsets and
//! lengths in the index are in scalars relative to the payload start, so the
//! index can be inspected with standard tools after skipping the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::DTensor;

const MAGIC: &[u8; 8] = b"NDCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    trainable: bool,
    offset: usize,
    len: usize,
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut index = Vec::with_capacity(store.len());
    let mut offset = 0usize;
    for id in store.ids() {
        let t = store.get(id);
        index.push(IndexEntry {
            name: store.name(id).to_string(),
            shape: t.shape().to_vec(),
            frozen: t.frozen(),
            trainable: t.trainable(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let index_bytes = serde_json::to_vec(&index)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(index_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&index_bytes)?;
    for id in store.ids() {
        for v in store.get(id).values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint into a fresh store. Frozen flags are restored;
/// trainable flags too, so an optimizer built on the result behaves as it
/// did when the file was written.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let index_len = u64::from_le_bytes(len_bytes) as usize;
    let mut index_bytes = vec![0u8; index_len];
    r.read_exact(&mut index_bytes)?;
    let index: Vec<IndexEntry> = serde_json::from_slice(&index_bytes)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let total: usize = index.iter().map(|e| e.len).sum();
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, index wants {}",
            payload.len(),
            total * 8
        )));
    }

    let mut store = ParamStore::new();
    for e in &index {
        let numel: usize = e.shape.iter().product();
        if numel != e.len {
            return Err(Error::Checkpoint(format!(
                "entry {} declares shape {:?} but {} values",
                e.name, e.shape, e.len
            )));
        }
        let mut values = Vec::with_capacity(e.len);
        for i in 0..e.len {
            let at = (e.offset + i) * 8;
            let bytes: [u8; 8] = payload[at..at + 8].try_into().unwrap();
            values.push(f64::from_le_bytes(bytes));
        }
        let mut t = DTensor::param(e.shape.clone(), values)?;
        t.set_trainable(e.trainable);
        t.set_frozen(e.frozen);
        store.add(&e.name, t);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = Rng::new(7);
        let mut store = ParamStore::new();
        store.add_weight("backbone.w", &[4, 3], 0.3, &mut rng);
        store.add_weight("head.b", &[5], 1.0, &mut rng);
        let bid = store.id_by_name("backbone.w").unwrap();
        store.get_mut(bid).set_frozen(true);

        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for id in store.ids() {
            let name = store.name(id);
            let lid = loaded.id_by_name(name).unwrap();
            let (a, b) = (store.get(id), loaded.get(lid));
            assert_eq!(a.shape(), b.shape(), "{name}");
            assert_eq!(a.frozen(), b.frozen(), "{name}");
            // bitwise, not approximate
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"PNG.....not a checkpoint").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = Rng::new(8);
        let mut store = ParamStore::new();
        store.add_weight("w", &[8], 1.0, &mut rng);
        save_checkpoint(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
