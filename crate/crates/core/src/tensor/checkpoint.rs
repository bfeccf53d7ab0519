//! Parameter container: `HVRP1\n`, a little-endian `u64` manifest length,
//! the JSON manifest, then the raw little-endian `f64` blob.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 6] = b"HVRP1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<ContainerEntry>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, String, Tensor)>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) {
        self.tensors.push((name.into(), group.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str, &'a Tensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, g, t)| n.strip_prefix(prefix).map(|rest| (rest, g.as_str(), t)))
    }
}

pub fn write_container(c: &Container) -> Vec<u8> {
    let mut entries = Vec::with_capacity(c.tensors.len());
    let mut blob = Vec::new();
    for (name, group, t) in &c.tensors {
        entries.push(ContainerEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            group: group.clone(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: "HVRP1".into(),
        meta: c.meta.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(CONTAINER_MAGIC.len() + 8 + json.len() + blob.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn read_container(bytes: &[u8]) -> Result<Container> {
    let header = CONTAINER_MAGIC.len();
    if bytes.len() < header + 8 || &bytes[..header] != CONTAINER_MAGIC {
        return Err(Error::Version("missing HVRP1 header".into()));
    }
    let len = u64::from_le_bytes(bytes[header..header + 8].try_into().unwrap()) as usize;
    let start = header + 8;
    let json = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Version("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Version(format!("bad manifest: {e}")))?;
    if manifest.format != "HVRP1" {
        return Err(Error::Version(format!("unsupported format `{}`", manifest.format)));
    }
    let blob = &bytes[start + len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let raw = blob
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| Error::Version(format!("blob too short for `{}`", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name, e.group, Tensor::new(e.shape, data)?));
    }
    Ok(Container {
        meta: manifest.meta,
        tensors,
    })
}
