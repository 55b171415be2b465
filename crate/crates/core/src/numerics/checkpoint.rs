//! Binary parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes  "IFRMCKPT"
//! version u32 LE   1
//! mlen    u64 LE   byte length of the manifest
//! manifest         UTF-8 JSON {"entries": [{"name", "shape", "dtype"}], "meta": {...}}
//! payload          little-endian f64 values, entry after entry in manifest order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"IFRMCKPT";
const VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
    /// Free-form scalars stored alongside the tensors (training step, etc.).
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

fn bad(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_params(store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.to_string(),
                tensor: Tensor::new(t.shape(), t.data().to_vec()).expect("param shape"),
            })
            .collect();
        Self {
            entries,
            meta: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    /// Copies every parameter of `store` from the checkpoint. Names and
    /// shapes must match; extra checkpoint entries are ignored.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let t = self
                .get(&name)
                .ok_or_else(|| bad(format!("missing entry `{name}`")))?;
            let expected = store.by_name(&name).expect("listed name").shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(bad(format!(
                    "entry `{name}` has shape {:?}, model expects {expected:?}",
                    t.shape()
                )));
            }
            store.assign(&name, t.data())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    dtype: DTYPE.to_string(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serialises");
        let payload: usize = self.entries.iter().map(|e| e.tensor.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, NumericsError> {
        let mut magic = [0u8; 8];
        bytes
            .read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        bytes
            .read_exact(&mut word)
            .map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut dword = [0u8; 8];
        bytes
            .read_exact(&mut dword)
            .map_err(|_| bad("truncated header"))?;
        let mlen = u64::from_le_bytes(dword) as usize;
        if bytes.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let (mbytes, mut payload) = bytes.split_at(mlen);
        let manifest: Manifest =
            serde_json::from_slice(mbytes).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for m in manifest.entries {
            if m.dtype != DTYPE {
                return Err(bad(format!(
                    "entry `{}`: unsupported dtype {}",
                    m.name, m.dtype
                )));
            }
            let n: usize = m.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                payload
                    .read_exact(&mut dword)
                    .map_err(|_| bad(format!("entry `{}`: truncated payload", m.name)))?;
                data.push(f64::from_le_bytes(dword));
            }
            let tensor = Tensor::new(&m.shape, data)?;
            entries.push(CheckpointEntry {
                name: m.name,
                tensor,
            });
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self {
            entries,
            meta: manifest.meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NumericsError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NumericsError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add(
            "a",
            Tensor::new(&[2, 2], vec![0.1, -2.5e-300, f64::MAX, 3.0]).unwrap(),
        );
        store.add(
            "b.c",
            Tensor::new(&[3], vec![1.0 / 3.0, -0.0, 7.0]).unwrap(),
        );
        let mut ckpt = Checkpoint::from_params(&store);
        ckpt.meta.insert("step".into(), 17.into());
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back, ckpt);
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.entries
                .iter()
                .flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&back), bits(&ckpt));

        let mut fresh = ParamStore::new();
        fresh.add("a", Tensor::zeros(&[2, 2]));
        fresh.add("b.c", Tensor::zeros(&[3]));
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(
            fresh.by_name("b.c").unwrap().data(),
            store.by_name("b.c").unwrap().data()
        );
    }

    #[test]
    fn rejects_truncated_and_mismatched() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 3]));
        let bytes = Checkpoint::from_params(&store).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());

        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3, 2]));
        let err = Checkpoint::from_bytes(&bytes)
            .unwrap()
            .restore_into(&mut other);
        assert!(err.unwrap_err().to_string().contains("shape"));
    }
}
