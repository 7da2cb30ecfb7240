//! Checkpoint container: `"MCKP"`, `u32` version, `u64` index length, a
//! JSON index, then the raw little-endian `f32` blobs it describes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volalign_autodiff::{Float, ParamSet, Tensor};

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn hash_entry<'a>(h: &mut Sha256, name: &str, shape: &[usize], values: impl Iterator<Item = f32> + 'a) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((shape.len() as u64).to_le_bytes());
    for &d in shape {
        h.update((d as u64).to_le_bytes());
    }
    for v in values {
        h.update(v.to_le_bytes());
    }
}

/// SHA-256 over parameter names, shapes and little-endian f32 values, in
/// insertion order; restricted to one component when given.
pub fn params_sha256<F: Float>(ps: &ParamSet<F>, component: Option<&str>) -> String {
    let mut h = Sha256::new();
    for (_, e) in ps.entries() {
        if component.is_some_and(|c| c != e.component) {
            continue;
        }
        hash_entry(&mut h, &e.name, e.tensor.shape(), e.tensor.data().iter().map(|v| v.to_f64_lossy() as f32));
    }
    hex::encode(h.finalize())
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub component: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Blob {
    fn bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.bytes()))
    }

    /// Bitwise equality (NaN payloads included).
    pub fn bit_eq(&self, other: &Blob) -> bool {
        self.name == other.name
            && self.component == other.component
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentInfo {
    pub name: String,
    pub frozen: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexComponent {
    name: String,
    frozen: bool,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexBlob {
    name: String,
    component: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    kind: String,
    components: Vec<IndexComponent>,
    blobs: Vec<IndexBlob>,
    config: serde_json::Value,
    metrics: serde_json::Value,
}

/// Named parameter blobs grouped into components with frozen flags, plus a
/// config snapshot and metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub kind: String,
    pub components: Vec<ComponentInfo>,
    pub blobs: Vec<Blob>,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
}

impl ModelCheckpoint {
    pub fn from_params(kind: &str, ps: &ParamSet<f32>, config: serde_json::Value, metrics: serde_json::Value) -> Self {
        let components = ps
            .components()
            .into_iter()
            .map(|name| {
                let frozen = ps.entries().filter(|(_, e)| e.component == name).all(|(_, e)| e.frozen);
                ComponentInfo { name, frozen }
            })
            .collect();
        let blobs = ps
            .entries()
            .map(|(_, e)| Blob {
                name: e.name.clone(),
                component: e.component.clone(),
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().to_vec(),
            })
            .collect();
        Self {
            kind: kind.to_string(),
            components,
            blobs,
            config,
            metrics,
        }
    }

    pub fn to_params(&self) -> Result<ParamSet<f32>> {
        let mut ps = ParamSet::new();
        for b in &self.blobs {
            ps.insert(b.name.clone(), b.component.clone(), Tensor::new(b.shape.clone(), b.data.clone())?)?;
        }
        for c in &self.components {
            ps.set_component_frozen(&c.name, c.frozen);
        }
        Ok(ps)
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn is_frozen(&self, component: &str) -> bool {
        self.components.iter().any(|c| c.name == component && c.frozen)
    }

    /// Same digest as [`params_sha256`] over the component's blobs.
    pub fn component_sha256(&self, component: &str) -> String {
        let mut h = Sha256::new();
        for b in self.blobs.iter().filter(|b| b.component == component) {
            hash_entry(&mut h, &b.name, &b.shape, b.data.iter().copied());
        }
        hex::encode(h.finalize())
    }

    /// Bitwise equality, treating NaN payloads as values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.components == other.components
            && self.config == other.config
            && self.metrics == other.metrics
            && self.blobs.len() == other.blobs.len()
            && self.blobs.iter().zip(&other.blobs).all(|(a, b)| a.bit_eq(b))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        for b in &self.blobs {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::Checkpoint(format!("blob `{}` shape does not match its length", b.name)));
            }
            if !self.components.iter().any(|c| c.name == b.component) {
                return Err(Error::Checkpoint(format!("blob `{}` names unknown component `{}`", b.name, b.component)));
            }
        }
        let mut offset = 0u64;
        let blobs = self
            .blobs
            .iter()
            .map(|b| {
                let length = 4 * b.data.len() as u64;
                let e = IndexBlob {
                    name: b.name.clone(),
                    component: b.component.clone(),
                    shape: b.shape.clone(),
                    offset,
                    length,
                    sha256: b.sha256(),
                };
                offset += length;
                e
            })
            .collect();
        let index = Index {
            kind: self.kind.clone(),
            components: self
                .components
                .iter()
                .map(|c| IndexComponent {
                    name: c.name.clone(),
                    frozen: c.frozen,
                    sha256: self.component_sha256(&c.name),
                })
                .collect(),
            blobs,
            config: self.config.clone(),
            metrics: self.metrics.clone(),
        };
        let json = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blobs {
            out.extend_from_slice(&b.bytes());
        }
        Ok(out)
    }

    /// Parses and verifies every blob and component checksum.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if bytes.len() < 16 {
            return Err(Error::Truncated { expected: 16, actual: bytes.len() as u64 });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return bad("bad magic".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body_start = 16u64.saturating_add(index_len);
        if (bytes.len() as u64) < body_start {
            return Err(Error::Truncated { expected: body_start, actual: bytes.len() as u64 });
        }
        let index: Index = serde_json::from_slice(&bytes[16..body_start as usize])?;
        let body = &bytes[body_start as usize..];
        let expected: u64 = index.blobs.iter().map(|b| b.length).sum();
        if body.len() as u64 != expected {
            return Err(Error::Truncated {
                expected: body_start + expected,
                actual: bytes.len() as u64,
            });
        }
        let mut blobs = Vec::with_capacity(index.blobs.len());
        let mut cursor = 0u64;
        for e in index.blobs {
            let n = e.shape.iter().product::<usize>() as u64;
            if e.offset != cursor || e.length != 4 * n {
                return bad(format!("blob `{}` has an inconsistent offset or length", e.name));
            }
            let raw = &body[e.offset as usize..(e.offset + e.length) as usize];
            if hex::encode(Sha256::digest(raw)) != e.sha256 {
                return bad(format!("blob `{}` failed its checksum", e.name));
            }
            cursor += e.length;
            blobs.push(Blob {
                name: e.name,
                component: e.component,
                shape: e.shape,
                data: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            });
        }
        let ckpt = Self {
            kind: index.kind,
            components: index
                .components
                .iter()
                .map(|c| ComponentInfo {
                    name: c.name.clone(),
                    frozen: c.frozen,
                })
                .collect(),
            blobs,
            config: index.config,
            metrics: index.metrics,
        };
        for c in &index.components {
            if ckpt.component_sha256(&c.name) != c.sha256 {
                return bad(format!("component `{}` failed its checksum", c.name));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
