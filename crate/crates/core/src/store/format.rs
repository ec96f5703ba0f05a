// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk activation store.
//!
//! A [container](crate::container) with magic `SAESTORE`. The JSON metadata
//! block carries dimensions, attributes, per-attribute label indices,
//! context token strings and the projection vocabulary. The payload is, in
//! order and all `f32` little-endian:
//!
//! 1. `num_samples * dim` activation rows;
//! 2. for each context, `tokens.len() * dim` per-token activations;
//! 3. if present, the `dim * vocab` token projection, row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationStore, Attribute, Context, TokenProjection};
use crate::container::{self, push_f32s};
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 8] = b"SAESTORE";
pub const STORE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    num_samples: usize,
    seed: u64,
    attributes: Vec<Attribute>,
    /// `labels[attribute][sample]` class indices.
    labels: Vec<Vec<u32>>,
    contexts: Vec<ContextHeader>,
    token_projection: Option<ProjectionHeader>,
}

#[derive(Serialize, Deserialize)]
struct ContextHeader {
    sample: usize,
    tokens: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ProjectionHeader {
    vocab: Vec<String>,
}

pub(crate) fn encode_store(store: &ActivationStore) -> Result<Vec<u8>> {
    let n = store.len();
    let n_attr = store.attributes.len();
    let header = Header {
        dim: store.dim,
        num_samples: n,
        seed: store.seed,
        attributes: store.attributes.clone(),
        labels: (0..n_attr)
            .map(|a| (0..n).map(|i| store.labels[i * n_attr + a]).collect())
            .collect(),
        contexts: store
            .contexts
            .iter()
            .map(|c| ContextHeader {
                sample: c.sample,
                tokens: c.tokens.clone(),
            })
            .collect(),
        token_projection: store
            .token_projection
            .as_ref()
            .map(|p| ProjectionHeader { vocab: p.vocab.clone() }),
    };
    let header = serde_json::to_vec(&header)?;
    let mut payload = Vec::new();
    push_f32s(&mut payload, &store.activations);
    for c in &store.contexts {
        push_f32s(&mut payload, &c.token_activations);
    }
    if let Some(p) = &store.token_projection {
        push_f32s(&mut payload, &p.matrix);
    }
    Ok(container::encode(STORE_MAGIC, STORE_VERSION, &header, &payload))
}

pub(crate) fn decode_store(bytes: &[u8]) -> Result<ActivationStore> {
    let c = container::decode(bytes, STORE_MAGIC, STORE_VERSION)?;
    let header: Header = serde_json::from_slice(c.header)
        .map_err(|e| Error::format(container::PREFIX_LEN as u64, format!("bad metadata: {e}")))?;
    let dim = header.dim;
    let n = header.num_samples;
    let token_count: usize = header.contexts.iter().map(|c| c.tokens.len()).sum();
    let vocab = header.token_projection.as_ref().map_or(0, |p| p.vocab.len());
    let expected = 4 * dim * (n + token_count + vocab);
    let mut payload = c.payload;
    payload.expect_len(expected)?;

    if header.labels.len() != header.attributes.len() || header.labels.iter().any(|l| l.len() != n) {
        return Err(Error::format(
            container::PREFIX_LEN as u64,
            "label table does not match attribute and sample counts",
        ));
    }
    let n_attr = header.attributes.len();
    let mut labels = vec![0u32; n * n_attr];
    for (a, col) in header.labels.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            labels[i * n_attr + a] = v;
        }
    }
    let activations = payload.f32s(n * dim)?;
    let mut contexts = Vec::with_capacity(header.contexts.len());
    for ch in header.contexts {
        let token_activations = payload.f32s(ch.tokens.len() * dim)?;
        contexts.push(Context {
            sample: ch.sample,
            tokens: ch.tokens,
            token_activations,
        });
    }
    let token_projection = match header.token_projection {
        Some(p) => Some(TokenProjection {
            matrix: payload.f32s(dim * p.vocab.len())?,
            vocab: p.vocab,
        }),
        None => None,
    };
    payload.finish()?;
    ActivationStore::from_parts(
        dim,
        header.seed,
        header.attributes,
        activations,
        labels,
        contexts,
        token_projection,
    )
}

/// Write `store` to `path`. Saving the same store twice yields identical bytes.
pub fn save_store(store: &ActivationStore, path: impl AsRef<Path>) -> Result<()> {
    container::write_file_atomic(path.as_ref(), &encode_store(store)?)
}

/// Read a store written by [`save_store`].
pub fn load_store(path: impl AsRef<Path>) -> Result<ActivationStore> {
    decode_store(&container::read_file(path.as_ref())?)
}
