//! Checkpoint directories: `manifest.json` plus a flat `tensors.bin`.
//!
//! `tensors.bin` is a sequence of little-endian records:
//! `name_len: u32, name, dtype: u8 (0 = f32, 1 = f64), ndim: u32,
//! dims: u64 * ndim, nbytes: u64, data`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::nn::ParamStore;
use super::NetworkConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vae,
    Nsvae,
    MaskDecoder,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ModelKind,
    pub network: NetworkConfig,
    pub skip_connections: bool,
    pub stage: String,
    pub epoch: usize,
    pub validation_loss: Option<f64>,
    pub tensors: Vec<String>,
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn exists(dir: &Path) -> bool {
    manifest_path(dir).is_file() && dir.join(TENSORS_FILE).is_file()
}

pub fn save(dir: &Path, manifest: &Manifest, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = store.tensors()?;
    let mut manifest = manifest.clone();
    manifest.tensors = tensors.keys().cloned().collect();

    let mut buf = Vec::new();
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let t = t.flatten_all()?;
        let dims = store.get(name).map(|p| p.var.dims().to_vec()).unwrap_or_default();
        let data: Vec<u8> = match t.dtype() {
            DType::F32 => {
                buf.push(0);
                t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()
            }
            DType::F64 => {
                buf.push(1);
                t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()
            }
            other => return Err(Error::invalid(format!("unsupported checkpoint dtype {other:?}"))),
        };
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        buf.extend_from_slice(&data);
    }
    let tensor_path = dir.join(TENSORS_FILE);
    let mut f = fs::File::create(&tensor_path).map_err(|e| Error::io(&tensor_path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tensor_path, e))?;

    let mpath = manifest_path(dir);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = manifest_path(dir);
    if !exists(dir) {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    Ok(serde_json::from_str(&text)?)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::invalid("truncated checkpoint tensor file"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads every tensor, converted to `dtype`.
pub fn load_tensors(dir: &Path, dtype: DType) -> Result<BTreeMap<String, Tensor>> {
    if !exists(dir) {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let path = dir.join(TENSORS_FILE);
    let mut raw = Vec::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&path, e))?;
    let mut cur = Cursor { data: &raw, pos: 0 };
    let mut out = BTreeMap::new();
    while cur.pos < raw.len() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::invalid("checkpoint tensor name is not UTF-8"))?;
        let code = cur.take(1)?[0];
        let ndim = cur.u32()? as usize;
        let dims = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let nbytes = cur.u64()? as usize;
        let bytes = cur.take(nbytes)?;
        let count: usize = dims.iter().product();
        let t = match code {
            0 if nbytes == 4 * count => {
                let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            1 if nbytes == 8 * count => {
                let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            _ => return Err(Error::invalid(format!("corrupt checkpoint record for {name}"))),
        };
        out.insert(name, t.to_dtype(dtype)?);
    }
    Ok(out)
}

/// Loads a checkpoint into `store`, requiring every stored name to match.
pub fn restore(dir: &Path, store: &ParamStore) -> Result<Manifest> {
    let manifest = load_manifest(dir)?;
    let tensors = load_tensors(dir, store.dtype())?;
    store.load(&tensors, true)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::VaeModel;

    #[test]
    fn round_trip_preserves_every_parameter() {
        let net = NetworkConfig {
            channels: vec![2, 2, 2, 2, 2, 2],
            latent_dim: 2,
            lstm_hidden: 3,
        };
        let a = VaeModel::new(&net, false, DType::F32, 1).unwrap();
        let b = VaeModel::new(&net, false, DType::F32, 2).unwrap();
        assert_ne!(a.store.fingerprint().unwrap(), b.store.fingerprint().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            kind: ModelKind::Vae,
            network: net.clone(),
            skip_connections: false,
            stage: "pretrain".into(),
            epoch: 3,
            validation_loss: Some(1.5),
            tensors: vec![],
        };
        save(dir.path(), &m, &a.store).unwrap();
        let back = restore(dir.path(), &b.store).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.tensors.len(), a.store.len());
        assert_eq!(a.store.fingerprint().unwrap(), b.store.fingerprint().unwrap());
    }

    #[test]
    fn missing_directory_is_reported() {
        let err = load_manifest(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}
