//! Checkpoint archive: an 8-byte little-endian manifest length, a JSON
//! manifest (names, shapes, dtype, step), then every tensor as raw
//! little-endian `f32` values concatenated in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    let manifest = Manifest {
        dtype: "f32".into(),
        step: store.step(),
        tensors: store
            .iter()
            .map(|(_, p)| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, p) in store.iter() {
        for &x in p.value.data() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(r: &mut R) -> Result<Manifest> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let manifest: Manifest = serde_json::from_slice(&header)?;
    if manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    Ok(manifest)
}

/// Loads values into an already-built store. Names and shapes must match
/// exactly; moments are left untouched.
pub fn read_checkpoint_into<T: Scalar, R: Read>(store: &mut ParamStore<T>, mut r: R) -> Result<()> {
    let manifest = read_manifest(&mut r)?;
    if manifest.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "archive holds {} tensors, model expects {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = store.id(&entry.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
        if store.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                store.value(id).shape()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        *store.value_mut(id) = Tensor::new(&entry.shape, data)?;
    }
    store.set_step(manifest.step);
    Ok(())
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    read_checkpoint_into(store, BufReader::new(File::open(path)?))
}
