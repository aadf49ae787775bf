//! Shared checkpoint container: a header line, one line of JSON metadata
//! (caller fields plus a tensor index and blob digest), then the raw
//! little-endian f32 parameter blob.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    #[serde(flatten)]
    meta: M,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

pub fn write<M: Serialize>(path: &Path, header: &str, meta: &M, vars: &BTreeMap<String, Var>) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, var) in vars {
        let values: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
            offset: blob.len() / 4,
            len: values.len(),
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let envelope = Envelope {
        meta,
        tensors,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut put = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
    put(header.as_bytes())?;
    put(b"\n")?;
    put(serde_json::to_string(&envelope)?.as_bytes())?;
    put(b"\n")?;
    put(&blob)
}

/// A parsed checkpoint whose digest has been verified.
pub struct Loaded<M> {
    pub meta: M,
    tensors: Vec<TensorEntry>,
    blob: Vec<u8>,
    path: std::path::PathBuf,
}

fn bad(path: &Path, reason: String) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    }
}

pub fn read<M: DeserializeOwned>(path: &Path, header: &str) -> Result<Loaded<M>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    if first.trim_end() != header {
        return Err(bad(path, format!("unknown header {:?}", first.trim_end())));
    }
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let envelope: Envelope<M> = serde_json::from_str(&line).map_err(|e| bad(path, format!("metadata: {e}")))?;
    let mut blob = Vec::new();
    reader.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;
    if hex::encode(Sha256::digest(&blob)) != envelope.blob_sha256 {
        return Err(bad(path, "parameter blob digest mismatch".into()));
    }
    Ok(Loaded {
        meta: envelope.meta,
        tensors: envelope.tensors,
        blob,
        path: path.to_path_buf(),
    })
}

impl<M> Loaded<M> {
    /// Copies stored tensors into `vars`; names and shapes must match exactly.
    pub fn assign(&self, vars: &BTreeMap<String, Var>) -> Result<()> {
        let path = self.path.as_path();
        if self.tensors.len() != vars.len() {
            return Err(bad(path, format!("{} tensors stored, model has {}", self.tensors.len(), vars.len())));
        }
        for entry in &self.tensors {
            let var = vars
                .get(&entry.name)
                .ok_or_else(|| bad(path, format!("unexpected tensor {}", entry.name)))?;
            if var.dims() != entry.shape.as_slice() || var.elem_count() != entry.len {
                return Err(bad(path, format!("shape mismatch for {}", entry.name)));
            }
            let bytes = self
                .blob
                .get(entry.offset * 4..(entry.offset + entry.len) * 4)
                .ok_or_else(|| bad(path, format!("blob too short for {}", entry.name)))?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(values, entry.shape.as_slice(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }
}
