// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE checkpoint files.
//!
//! Same container as activation stores: `SAECKPT\0`, version, a JSON header
//! (`kind`, `k`, `dim`, `dict_size`, `info`), then little-endian `f64`
//! payload blocks in order `W_enc` (row per latent), `b_enc`, `W_dec` (one
//! decoder direction per latent), `b_dec`, and `theta` for JumpReLU.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SaeInfo, SaeKind, SaeModel};
use crate::container::{self, push_f64s};
use crate::error::{Error, Result};

pub const SAE_MAGIC: &[u8; 8] = b"SAECKPT\0";
pub const SAE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    kind: SaeKind,
    dim: usize,
    dict_size: usize,
    info: SaeInfo,
}

pub(crate) fn encode_sae(model: &SaeModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        kind: model.kind.clone(),
        dim: model.dim,
        dict_size: model.dict_size,
        info: model.info.clone(),
    })?;
    let mut payload = Vec::new();
    push_f64s(&mut payload, &model.w_enc);
    push_f64s(&mut payload, &model.b_enc);
    push_f64s(&mut payload, &model.w_dec);
    push_f64s(&mut payload, &model.b_dec);
    if let SaeKind::JumpRelu { theta } = &model.kind {
        push_f64s(&mut payload, theta);
    }
    Ok(container::encode(SAE_MAGIC, SAE_VERSION, &header, &payload))
}

pub(crate) fn decode_sae(bytes: &[u8]) -> Result<SaeModel> {
    let c = container::decode(bytes, SAE_MAGIC, SAE_VERSION)?;
    let header: Header = serde_json::from_slice(c.header)
        .map_err(|e| Error::format(container::PREFIX_LEN as u64, format!("bad checkpoint header: {e}")))?;
    let (dim, dict) = (header.dim, header.dict_size);
    let jump = matches!(header.kind, SaeKind::JumpRelu { .. });
    let mut payload = c.payload;
    payload.expect_len(8 * (2 * dict * dim + dict + dim + if jump { dict } else { 0 }))?;
    let w_enc = payload.f64s(dict * dim)?;
    let b_enc = payload.f64s(dict)?;
    let w_dec = payload.f64s(dict * dim)?;
    let b_dec = payload.f64s(dim)?;
    let kind = match header.kind {
        SaeKind::JumpRelu { .. } => SaeKind::JumpRelu {
            theta: payload.f64s(dict)?,
        },
        other => other,
    };
    payload.finish()?;
    SaeModel::from_parts(kind, dim, dict, w_enc, b_enc, w_dec, b_dec, header.info)
}

/// Write a checkpoint file (atomically).
pub fn save_sae(model: &SaeModel, path: impl AsRef<Path>) -> Result<()> {
    container::write_file_atomic(path.as_ref(), &encode_sae(model)?)
}

/// Read a checkpoint file written by [`save_sae`].
pub fn load_sae(path: impl AsRef<Path>) -> Result<SaeModel> {
    decode_sae(&container::read_file(path.as_ref())?)
}
