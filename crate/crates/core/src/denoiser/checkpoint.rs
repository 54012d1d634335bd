//! GDRM checkpoint container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, DenoiserModel, Dims, Layout, ModelMeta};
use crate::error::{GdrError, Result};
use crate::latentdata::Reader;

pub const MODEL_MAGIC: &[u8; 4] = b"GDRM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: Arch,
    dims: Dims,
    param_count: usize,
    #[serde(flatten)]
    meta: ModelMeta,
}

pub fn encode_model(model: &DenoiserModel) -> Result<Vec<u8>> {
    let header = Header {
        arch: model.arch,
        dims: model.dims,
        param_count: model.param_count(),
        meta: model.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    for p in model.params() {
        blob.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(12 + json.len() + blob.len() + 4);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out.extend_from_slice(&crc32fast::hash(&blob).to_le_bytes());
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<DenoiserModel> {
    let mut r = Reader::new(bytes);
    let header: Header = r.preamble(MODEL_MAGIC, MODEL_VERSION)?;
    let at = r.pos();
    header
        .dims
        .validate(header.arch)
        .map_err(|e| GdrError::format(at, e.to_string()))?;
    let expected = Layout::for_arch(header.arch, &header.dims).total();
    if expected != header.param_count {
        return Err(GdrError::format(
            at,
            format!(
                "param_count {} disagrees with {} layout ({expected})",
                header.param_count, header.arch
            ),
        ));
    }
    let start = r.pos() as usize;
    let params = r.f32s(header.param_count, "parameter blob")?;
    r.finish_crc(start)?;
    DenoiserModel::from_params(header.arch, header.dims, params, header.meta)
        .map_err(|e| GdrError::format(at, e.to_string()))
}

pub fn save_model(model: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    decode_model(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless it has the expected architecture.
pub fn load_model_as(path: impl AsRef<Path>, arch: Arch) -> Result<DenoiserModel> {
    let m = load_model(path)?;
    if m.arch != arch {
        return Err(GdrError::format(
            12,
            format!("checkpoint holds a {} model, expected {arch}", m.arch),
        ));
    }
    Ok(m)
}
