//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//! `"TGCK"`, u32 version, u64 config length + UTF-8 config text, u32 entry
//! count, entries of (u64 name length + name, u32 rank, u64 dims…, u64 byte
//! offset into the payload), then the payload: per entry a u64 value count
//! followed by that many f32 values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::numeric::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"TGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint has no parameter {0}")]
    Missing(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint parameter {0} is not part of the model")]
    Unexpected(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_store(config: &str, store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| CheckpointEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.data().iter().map(|&x| x as f32).collect(),
            })
            .collect();
        Checkpoint { config: config.to_string(), entries }
    }

    /// Copies values into a store with exactly the same parameter set.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if let Some(extra) = self.entries.iter().find(|e| store.id(&e.name).is_none()) {
            return Err(CheckpointError::Unexpected(extra.name.clone()));
        }
        for id in store.ids() {
            let name = store.name(id).to_string();
            let entry = self.entries.iter().find(|e| e.name == name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let expected = store.get(id).shape().to_vec();
            if entry.shape != expected {
                return Err(CheckpointError::Shape { name, expected, found: entry.shape.clone() });
            }
            let data = entry.values.iter().map(|&v| f64::from(v)).collect();
            let tensor = Tensor::new(expected, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            store.set(id, tensor).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 + 4 * e.values.len() as u64;
        }
        for e in &self.entries {
            out.extend_from_slice(&(e.values.len() as u64).to_le_bytes());
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = read_string(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!("{name}: rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = read_u64(&mut r)?;
            manifest.push((name, shape, offset));
        }
        let payload = r;
        let mut entries = Vec::with_capacity(manifest.len());
        for (name, shape, offset) in manifest {
            let mut block = payload
                .get(offset as usize..)
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: offset {offset} past end")))?;
            let len = read_u64(&mut block)? as usize;
            let expected: usize = shape.iter().product();
            if len != expected {
                return Err(CheckpointError::Corrupt(format!("{name}: {len} values for shape {shape:?}")));
            }
            if block.len() < 4 * len {
                return Err(CheckpointError::Corrupt(format!("{name}: truncated payload")));
            }
            let values = block[..4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(CheckpointEntry { name, shape, values });
        }
        Ok(Checkpoint { config, entries })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let file_name = path.file_name().ok_or_else(|| io::Error::other("checkpoint path has no file name"))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut &[u8]) -> Result<String, CheckpointError> {
    let len = read_u64(r)? as usize;
    if r.len() < len {
        return Err(CheckpointError::Corrupt("truncated string".into()));
    }
    let (s, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Precision;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(Precision::F32);
        s.add("a.weight", Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1e-7, 5.5, -6.25]).unwrap()).unwrap();
        s.add("a.bias", Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = store();
        let ck = Checkpoint::from_store("d_model = 3\n", &s);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut fresh = ParamStore::new(Precision::F32);
        fresh.add("a.weight", Tensor::zeros(&[2, 3])).unwrap();
        fresh.add("a.bias", Tensor::zeros(&[1, 3])).unwrap();
        back.apply_to(&mut fresh).unwrap();
        for (x, y) in s.iter().zip(fresh.iter()) {
            assert_eq!(x.1.tensor, y.1.tensor);
        }
        assert!(!dir.path().join(".m.ckpt.tmp").exists());
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::from_store("k = v\n", &store()).to_bytes();
        assert_eq!(&bytes[..4], b"TGCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 6);
        assert_eq!(&bytes[16..22], b"k = v\n");
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 2);
        // Payload ends with the bias block: 3 floats.
        let tail = &bytes[bytes.len() - 12..];
        assert_eq!(f32::from_le_bytes(tail[8..12].try_into().unwrap()), 3.0);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::Magic)));
        let mut bytes = Checkpoint::from_store("", &store()).to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version(9))));
        let bytes = Checkpoint::from_store("", &store()).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn apply_checks_names_and_shapes() {
        let ck = Checkpoint::from_store("", &store());
        let mut other = ParamStore::new(Precision::F32);
        other.add("a.weight", Tensor::zeros(&[3, 2])).unwrap();
        other.add("a.bias", Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(ck.apply_to(&mut other), Err(CheckpointError::Shape { .. })));
        let mut missing = ParamStore::new(Precision::F32);
        missing.add("a.weight", Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(ck.apply_to(&mut missing), Err(CheckpointError::Unexpected(_))));
    }
}
