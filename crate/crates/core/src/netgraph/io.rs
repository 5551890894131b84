//! Container files: `MUXS` magic, `u32` version, `u64` manifest length, a JSON
//! manifest, then raw little-endian `f32` values in manifest order. All
//! integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, NetworkModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MUXS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: String,
    pub blob: Vec<f32>,
    /// Byte offset of the blob within the file.
    pub blob_offset: u64,
}

pub fn encode_container(manifest: &str, blob: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + manifest.len() + 4 * blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let blob_offset = HEADER_LEN
        .checked_add(mlen)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated manifest of {mlen} bytes")))?;
    let manifest = std::str::from_utf8(&bytes[HEADER_LEN as usize..blob_offset as usize])
        .map_err(|e| Error::format(HEADER_LEN + e.valid_up_to() as u64, "manifest is not UTF-8"))?
        .to_string();
    let rest = &bytes[blob_offset as usize..];
    if !rest.len().is_multiple_of(4) {
        return Err(Error::format(
            bytes.len() as u64,
            format!("blob length {} is not a multiple of 4", rest.len()),
        ));
    }
    let blob = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Container {
        manifest,
        blob,
        blob_offset,
    })
}

pub fn write_container(path: impl AsRef<Path>, manifest: &str, blob: &[f32]) -> Result<()> {
    std::fs::write(path, encode_container(manifest, blob))?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    decode_container(&std::fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format: String,
    network: ArchitectureConfig,
}

const MODEL_FORMAT: &str = "model";

impl NetworkModel {
    pub fn flat_params(&self) -> Vec<f32> {
        self.params().concat()
    }

    /// Copies `blob[offset..]` into the parameters in order; returns the
    /// number of values consumed.
    pub fn load_flat_params(&mut self, blob: &[f32]) -> Result<usize> {
        let need = self.param_count();
        if blob.len() < need {
            return Err(Error::dim(format!(
                "model {} needs {need} parameters, {} available",
                self.name,
                blob.len()
            )));
        }
        let mut at = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&blob[at..at + p.len()]);
            at += p.len();
        }
        Ok(at)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_string(&ModelManifest {
            format: MODEL_FORMAT.into(),
            network: self.config(),
        })
        .expect("manifest serializes");
        encode_container(&manifest, &self.flat_params())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = decode_container(bytes)?;
        let manifest: ModelManifest = serde_json::from_str(&c.manifest)
            .map_err(|e| Error::format(HEADER_LEN, format!("bad manifest: {e}")))?;
        if manifest.format != MODEL_FORMAT {
            return Err(Error::format(
                HEADER_LEN,
                format!("expected a model file, found {:?}", manifest.format),
            ));
        }
        let mut model = manifest
            .network
            .build()
            .map_err(|e| Error::format(HEADER_LEN, e.to_string()))?;
        let need = model.param_count();
        if c.blob.len() != need {
            return Err(Error::format(
                c.blob_offset + 4 * c.blob.len().min(need) as u64,
                format!("expected {need} parameters, found {}", c.blob.len()),
            ));
        }
        model.load_flat_params(&c.blob)?;
        Ok(model)
    }
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    NetworkModel::from_bytes(&std::fs::read(path)?)
}
