//! Named float32 tensor store persisted as a text manifest plus a raw blob.
//!
//! `<base>.manifest` holds one line per tensor:
//!
//! ```text
//! # albuseg weight store v1
//! enc.stage0.block0.conv1.weight	f32	8,3,7,7	0	<sha256 of the tensor bytes>
//! ```
//!
//! and `<base>.blob` holds the little-endian float32 payloads back to back.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MANIFEST_HEADER: &str = "# albuseg weight store v1";

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: Vec<StoredTensor>,
    index: HashMap<String, usize>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::WeightStore(format!("invalid tensor name {name:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::WeightStore(format!("duplicate tensor name '{name}'")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::WeightStore(format!(
                "tensor '{name}' shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(StoredTensor { name, shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<StoredTensor> {
        let i = self.index.remove(name)?;
        let t = self.tensors.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredTensor> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Serializes to `(manifest text, blob bytes)`.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        let mut blob = Vec::new();
        for t in &self.tensors {
            let offset = blob.len();
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let digest = hex::encode(Sha256::digest(&blob[offset..]));
            let shape = if t.shape.is_empty() {
                "scalar".to_string()
            } else {
                t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            writeln!(manifest, "{}\tf32\t{shape}\t{offset}\t{digest}", t.name).unwrap();
        }
        (manifest, blob)
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::WeightStore(msg);
        let mut lines = manifest.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(bad("missing manifest header".into()));
        }
        let mut store = WeightStore::new();
        let mut expected_offset = 0usize;
        for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, dtype, shape, offset, digest] = fields[..] else {
                return Err(bad(format!("line {}: expected 5 tab-separated fields", ln + 2)));
            };
            if dtype != "f32" {
                return Err(bad(format!("tensor '{name}': unsupported dtype {dtype}")));
            }
            let shape: Vec<usize> = if shape == "scalar" {
                vec![]
            } else {
                shape
                    .split(',')
                    .map(|s| s.parse().map_err(|_| bad(format!("tensor '{name}': bad shape {shape}"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(|_| bad(format!("tensor '{name}': bad offset")))?;
            if offset != expected_offset {
                return Err(bad(format!(
                    "tensor '{name}': offset {offset} inconsistent with preceding shapes (expected {expected_offset})"
                )));
            }
            let nbytes = 4 * shape.iter().product::<usize>();
            let end = offset + nbytes;
            if end > blob.len() {
                return Err(bad(format!("tensor '{name}': blob too short ({} < {end})", blob.len())));
            }
            let bytes = &blob[offset..end];
            if hex::encode(Sha256::digest(bytes)) != digest {
                return Err(Error::Checksum(name.to_string()));
            }
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            store.insert(name, &shape, data)?;
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(bad(format!(
                "blob has {} bytes, manifest accounts for {expected_offset}",
                blob.len()
            )));
        }
        Ok(store)
    }
}

/// `(<base>.manifest, <base>.blob)`.
pub fn store_paths(base: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let base = base.as_ref().as_os_str().to_owned();
    let mut m = base.clone();
    m.push(".manifest");
    let mut b = base;
    b.push(".blob");
    (PathBuf::from(m), PathBuf::from(b))
}

pub fn write_weights(store: &WeightStore, base: impl AsRef<Path>) -> Result<()> {
    let (mpath, bpath) = store_paths(base);
    let (manifest, blob) = store.encode();
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

pub fn read_weights(base: impl AsRef<Path>) -> Result<WeightStore> {
    let (mpath, bpath) = store_paths(base);
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    WeightStore::decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_round_trips() {
        let (m, b) = WeightStore::new().encode();
        assert_eq!(m.lines().count(), 1);
        assert!(b.is_empty());
        assert!(WeightStore::decode(&m, &b).unwrap().is_empty());
    }

    #[test]
    fn single_tensor_payload_size() {
        let mut s = WeightStore::new();
        let data: Vec<f32> = (0..108).map(|i| i as f32 * 0.5).collect();
        s.insert("enc.conv1.weight", &[4, 3, 3, 3], data).unwrap();
        let (m, b) = s.encode();
        assert_eq!(b.len(), 108 * 4);
        let back = WeightStore::decode(&m, &b).unwrap();
        assert_eq!(back.get("enc.conv1.weight").unwrap().shape, vec![4, 3, 3, 3]);
        assert_eq!(back, s);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut s = WeightStore::new();
        s.insert("a", &[2], vec![1.0, 2.0]).unwrap();
        s.insert("b", &[3], vec![3.0, 4.0, 5.0]).unwrap();
        let (m, mut b) = s.encode();
        b[9] ^= 0x10;
        assert_eq!(WeightStore::decode(&m, &b).unwrap_err().to_string(), "checksum mismatch for tensor 'b'");
    }

    #[test]
    fn duplicates_and_missing() {
        let mut s = WeightStore::new();
        s.insert("a", &[1], vec![1.0]).unwrap();
        assert!(s.insert("a", &[1], vec![1.0]).is_err());
        assert_eq!(s.get("zz").unwrap_err().to_string(), "missing tensor 'zz'");
        let m = format!("{MANIFEST_HEADER}\na\tf32\t1\t0\tx\na\tf32\t1\t4\tx\n");
        assert!(WeightStore::decode(&m, &[0; 8]).is_err());
    }

    #[test]
    fn offset_mismatch_rejected() {
        let mut s = WeightStore::new();
        s.insert("a", &[2], vec![1.0, 2.0]).unwrap();
        s.insert("b", &[1], vec![3.0]).unwrap();
        let (m, b) = s.encode();
        let m = m.replace("\t8\t", "\t4\t");
        assert!(WeightStore::decode(&m, &b).unwrap_err().to_string().contains("offset"));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = WeightStore::new();
        s.insert("x", &[], vec![7.5]).unwrap();
        s.insert("y", &[2, 2], vec![0.1, -0.2, f32::MIN_POSITIVE, 3.0]).unwrap();
        let base = dir.path().join("model");
        write_weights(&s, &base).unwrap();
        assert_eq!(read_weights(&base).unwrap(), s);
        assert!(dir.path().join("model.manifest").exists());
    }
}
