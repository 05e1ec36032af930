//! Binary parameter checkpoints: magic, a length-prefixed JSON header
//! (config echo and tensor table), then little-endian f64 tensor data.

use std::fs;
use std::path::Path;

use insectfm_core::params::{Group, ParamStore};
use insectfm_core::tensor::Mat;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::write_atomic;

pub const MAGIC: &[u8; 8] = b"IFMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub trainable: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Mat>,
}

impl Checkpoint {
    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))
    }

    /// Copy every tensor of `store` from the checkpoint, matching by name
    /// and shape, and restore the trainable flags.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let Some(i) = self.header.tensors.iter().position(|t| t.name == name) else {
                return Err(Error::Format(format!("checkpoint lacks tensor {name}")));
            };
            store.load_value(&name, self.tensors[i].clone())?;
        }
        let groups: Vec<Group> = self.header.trainable.iter().filter_map(|g| Group::parse(g)).collect();
        store.set_only_trainable(&groups);
        Ok(())
    }
}

pub fn encode(kind: &str, config: &impl Serialize, store: &ParamStore) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group.as_str().into(),
            rows: p.value.rows,
            cols: p.value.cols,
            dtype: "f64le".into(),
            offset: data.len(),
        });
        for v in &p.value.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        config: serde_json::to_value(config).expect("serialisable config"),
        trainable: store.trainable_groups().iter().map(|g| g.as_str().to_string()).collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("serialisable header");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Format(format!("invalid checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", header.format_version)));
    }
    let data = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if t.dtype != "f64le" {
            return Err(bad(format!("tensor {} has dtype {}", t.name, t.dtype)));
        }
        let len = t.rows * t.cols * 8;
        let Some(chunk) = data.get(t.offset..t.offset + len) else {
            return Err(bad(format!("tensor {} runs past the end of the file", t.name)));
        };
        let vals = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Mat::from_vec(t.rows, t.cols, vals)?);
    }
    Ok(Checkpoint { header, tensors })
}

pub fn save(path: &Path, kind: &str, config: &impl Serialize, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(kind, config, store))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
