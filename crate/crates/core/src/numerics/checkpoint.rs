//! Checkpoint file: a magic line, one JSON header line, then the raw
//! little-endian `f32` payload of every tensor in header order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "ECLAB-CHECKPOINT v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// What the parameters belong to, e.g. `agents` or `translator`.
    pub kind: String,
    /// Hash of the configuration that produced the parameters.
    pub config_fingerprint: String,
    pub seed: u64,
    /// Free-form tags; the translator records its completed phases here.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn new(kind: &str, config_fingerprint: &str, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            config_fingerprint: config_fingerprint.to_string(),
            seed,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    let mut header = header.clone();
    header.tensors = store
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let io = |e| Error::io("<checkpoint>", e);
    writeln!(w, "{MAGIC}").map_err(io)?;
    writeln!(w, "{}", serde_json::to_string(&header)?).map_err(io)?;
    let mut buf = Vec::with_capacity(store.num_scalars() * 4);
    for (_, t) in store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(CheckpointHeader, ParamStore)> {
    let mut r = BufReader::new(r);
    let perr = |line, message: String| Error::Parse {
        path: "<checkpoint>".into(),
        line,
        message,
    };
    let mut magic = String::new();
    r.read_line(&mut magic).map_err(|e| Error::io("<checkpoint>", e))?;
    if magic.trim_end() != MAGIC {
        return Err(perr(1, format!("bad magic {:?}", magic.trim_end())));
    }
    let mut header_line = String::new();
    r.read_line(&mut header_line).map_err(|e| Error::io("<checkpoint>", e))?;
    let header: CheckpointHeader =
        serde_json::from_str(header_line.trim_end()).map_err(|e| perr(2, e.to_string()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io("<checkpoint>", e))?;
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(perr(
            3,
            format!("payload has {} bytes, header needs {}", payload.len(), total * 4),
        ));
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = payload[off..off + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        off += n * 4;
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((header, store))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, header, store)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f)
}

/// Copy values from `loaded` into `target`, matching by name and shape.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::State(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| Error::State(format!("checkpoint lacks tensor {name}")))?;
        let src = loaded.get(src);
        if src.shape() != target.get(id).shape() {
            return Err(Error::Shape {
                context: "restore checkpoint",
                expected: target.get(id).shape().to_vec(),
                actual: src.shape().to_vec(),
            });
        }
        *target.get_mut(id) = src.clone();
    }
    Ok(())
}
