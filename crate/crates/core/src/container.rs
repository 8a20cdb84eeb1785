//! Binary container shared by checkpoints and cached statistics.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DGANCKPT"
//! version  u32
//! hlen     u64      byte length of the JSON header
//! header   hlen bytes of UTF-8 JSON: {"meta": <any>, "blobs": [BlobEntry]}
//! payload  concatenated blobs; BlobEntry.offset is relative to payload start
//! ```
//!
//! Float blobs store raw little-endian values of the declared dtype; `bits`
//! blobs store bit-packed boolean masks.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DGANCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    /// "f32", "f64" or "bits".
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    blobs: Vec<BlobEntry>,
}

/// An in-memory container: JSON metadata plus named blobs.
#[derive(Clone, Debug, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    blobs: Vec<(BlobEntry, Vec<u8>)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, blobs: Vec::new() }
    }

    fn push(&mut self, name: &str, dtype: &str, shape: &[usize], bytes: Vec<u8>) -> Result<()> {
        if self.blobs.iter().any(|(e, _)| e.name == name) {
            return Err(Error::Checkpoint(format!("duplicate blob {name}")));
        }
        let offset = self.blobs.last().map_or(0, |(e, _)| e.offset + e.len);
        let entry = BlobEntry {
            name: name.to_string(),
            dtype: dtype.to_string(),
            shape: shape.to_vec(),
            offset,
            len: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        self.blobs.push((entry, bytes));
        Ok(())
    }

    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        self.push(name, T::DTYPE, t.shape(), t.to_le_bytes())
    }

    pub fn put_bits(&mut self, name: &str, shape: &[usize], packed: Vec<u8>) -> Result<()> {
        self.push(name, "bits", shape, packed)
    }

    pub fn entries(&self) -> impl Iterator<Item = &BlobEntry> {
        self.blobs.iter().map(|(e, _)| e)
    }

    fn find(&self, name: &str) -> Result<&(BlobEntry, Vec<u8>)> {
        self.blobs
            .iter()
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))
    }

    /// A float blob, converted to `T` when stored in the other precision.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let (e, bytes) = self.find(name)?;
        match e.dtype.as_str() {
            "f32" => Ok(Tensor::<f32>::from_le_bytes(&e.shape, bytes)?.cast()),
            "f64" => Ok(Tensor::<f64>::from_le_bytes(&e.shape, bytes)?.cast()),
            other => Err(Error::Checkpoint(format!("blob {name} has dtype {other}, expected a float"))),
        }
    }

    pub fn bits(&self, name: &str) -> Result<(Vec<usize>, &[u8])> {
        let (e, bytes) = self.find(name)?;
        if e.dtype != "bits" {
            return Err(Error::Checkpoint(format!("blob {name} is not a bit mask")));
        }
        Ok((e.shape.clone(), bytes))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            blobs: self.blobs.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("container header", e))?;
        let payload: usize = self.blobs.iter().map(|(_, b)| b.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, b) in &self.blobs {
            out.extend_from_slice(b);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let start = 20usize
            .checked_add(hlen)
            .filter(|&s| s <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..start]).map_err(|e| Error::json("container header", e))?;
        let payload = &bytes[start..];
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for e in header.blobs {
            let (o, l) = (e.offset as usize, e.len as usize);
            let b = payload
                .get(o..o.checked_add(l).ok_or_else(|| bad("blob overflow".into()))?)
                .ok_or_else(|| bad(format!("blob {} outside payload", e.name)))?;
            if hex::encode(Sha256::digest(b)) != e.sha256 {
                return Err(bad(format!("blob {} failed its checksum", e.name)));
            }
            blobs.push((e, b.to_vec()));
        }
        Ok(Container {
            meta: header.meta,
            blobs,
        })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Container::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let mut c = Container::new(serde_json::json!({"step": 3}));
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        c.put_tensor("w", &t).unwrap();
        c.put_bits("m", &[3], vec![0b101]).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta["step"], 3);
        assert_eq!(back.tensor::<f32>("w").unwrap(), t);
        assert_eq!(back.tensor::<f64>("w").unwrap().data()[2], 3.5);
        assert_eq!(back.bits("m").unwrap().1, &[0b101]);
        let mut broken = bytes.clone();
        *broken.last_mut().unwrap() ^= 1;
        assert!(Container::from_bytes(&broken).is_err());
        assert!(Container::from_bytes(&bytes[..10]).is_err());
    }
}
