// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled activation datasets.
//!
//! An [`ActivationStore`] holds one activation vector per text sample, the
//! sample's class under every declared attribute, and optionally token-level
//! evidence (for the judge) and an unembedding-style token projection (for
//! promoted tokens). Stores are immutable once built and can be shared
//! freely across threads.

mod format;
mod partition;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;

pub use format::{load_store, save_store, STORE_MAGIC, STORE_VERSION};
pub use partition::{
    partition_scr, partition_tpp, split_train_eval, ScrPair, ScrPartition, ScrPartitionSizes, TppPartition,
};
pub use synthetic::{generate_synthetic, ConceptFeatures, GroundTruth, SyntheticSpec};

/// A labeling dimension such as `gender` or `profession`, with its ordered classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub classes: Vec<String>,
}

impl Attribute {
    pub fn new(name: impl Into<String>, classes: &[&str]) -> Self {
        Self {
            name: name.into(),
            classes: classes.iter().map(|c| (*c).to_owned()).collect(),
        }
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }
}

/// Token-level evidence for one sample: the tokens and one activation
/// vector per token (`tokens.len() * dim` values, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub sample: usize,
    pub tokens: Vec<String>,
    pub token_activations: Vec<f32>,
}

impl Context {
    pub fn token_activation(&self, token: usize, dim: usize) -> &[f32] {
        &self.token_activations[token * dim..(token + 1) * dim]
    }
}

/// A `dim x vocab` matrix (row-major) mapping activation directions to
/// token logits, with the vocabulary strings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProjection {
    pub vocab: Vec<String>,
    pub matrix: Vec<f32>,
}

/// Labeled activation vectors plus optional token evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    dim: usize,
    seed: u64,
    attributes: Vec<Attribute>,
    activations: Vec<f32>,
    /// Class index per (sample, attribute), row-major by sample.
    labels: Vec<u32>,
    contexts: Vec<Context>,
    token_projection: Option<TokenProjection>,
}

impl ActivationStore {
    /// Build and validate a store.
    ///
    /// `labels` holds one class index per attribute for every sample,
    /// row-major by sample. Contexts must be sorted by sample index.
    pub fn from_parts(
        dim: usize,
        seed: u64,
        attributes: Vec<Attribute>,
        activations: Vec<f32>,
        labels: Vec<u32>,
        contexts: Vec<Context>,
        token_projection: Option<TokenProjection>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::data("store dim must be positive"));
        }
        if activations.len() % dim != 0 {
            return Err(Error::data(format!(
                "{} activation values is not a multiple of dim {dim}",
                activations.len()
            )));
        }
        let n = activations.len() / dim;
        let n_attr = attributes.len();
        if labels.len() != n * n_attr {
            return Err(Error::data(format!(
                "expected {} labels ({n} samples x {n_attr} attributes), got {}",
                n * n_attr,
                labels.len()
            )));
        }
        for (a, attr) in attributes.iter().enumerate() {
            if attr.classes.is_empty() {
                return Err(Error::data(format!("attribute {} has no classes", attr.name)));
            }
            if attributes[..a].iter().any(|o| o.name == attr.name) {
                return Err(Error::data(format!("duplicate attribute {}", attr.name)));
            }
            if let Some(bad) = (0..n).find(|&i| labels[i * n_attr + a] as usize >= attr.classes.len()) {
                return Err(Error::data(format!(
                    "sample {bad}: class index {} out of range for attribute {}",
                    labels[bad * n_attr + a],
                    attr.name
                )));
            }
        }
        let mut last = None;
        for ctx in &contexts {
            if ctx.sample >= n {
                return Err(Error::data(format!("context refers to missing sample {}", ctx.sample)));
            }
            if last.is_some_and(|l| l >= ctx.sample) {
                return Err(Error::data("contexts must be sorted by distinct sample index"));
            }
            if ctx.token_activations.len() != ctx.tokens.len() * dim {
                return Err(Error::data(format!(
                    "context for sample {} has {} token values, expected {}",
                    ctx.sample,
                    ctx.token_activations.len(),
                    ctx.tokens.len() * dim
                )));
            }
            last = Some(ctx.sample);
        }
        if let Some(p) = &token_projection {
            if p.matrix.len() != dim * p.vocab.len() {
                return Err(Error::data(format!(
                    "token projection must be {dim} x {} ({} values), got {}",
                    p.vocab.len(),
                    dim * p.vocab.len(),
                    p.matrix.len()
                )));
            }
        }
        Ok(Self {
            dim,
            seed,
            attributes,
            activations,
            labels,
            contexts,
            token_projection,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.activations.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    /// Seed for partition sampling.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn activations(&self) -> &[f32] {
        &self.activations
    }

    pub fn activation(&self, sample: usize) -> &[f32] {
        &self.activations[sample * self.dim..(sample + 1) * self.dim]
    }

    pub fn contexts(&self) -> &[Context] {
        &self.contexts
    }

    pub fn token_projection(&self) -> Option<&TokenProjection> {
        self.token_projection.as_ref()
    }

    /// Position and definition of a named attribute.
    pub fn attribute(&self, name: &str) -> Result<(usize, &Attribute)> {
        self.attributes
            .iter()
            .enumerate()
            .find(|(_, a)| a.name == name)
            .ok_or_else(|| Error::data(format!("store has no attribute {name:?}")))
    }

    /// Index of `class` within `attribute`.
    pub fn class_index(&self, attribute: &str, class: &str) -> Result<(usize, usize)> {
        let (a, attr) = self.attribute(attribute)?;
        let c = attr
            .class_index(class)
            .ok_or_else(|| Error::data(format!("attribute {attribute:?} has no class {class:?}")))?;
        Ok((a, c))
    }

    /// Class index of `sample` under the attribute at position `attr`.
    pub fn label_index(&self, sample: usize, attr: usize) -> usize {
        self.labels[sample * self.attributes.len() + attr] as usize
    }

    /// Class name of `sample` under `attribute`.
    pub fn label(&self, sample: usize, attribute: &str) -> Result<&str> {
        let (a, attr) = self.attribute(attribute)?;
        Ok(&attr.classes[self.label_index(sample, a)])
    }

    /// Sample indices whose `attribute` equals `class`, in store order.
    pub fn samples_with(&self, attribute: &str, class: &str) -> Result<Vec<usize>> {
        let (a, c) = self.class_index(attribute, class)?;
        Ok((0..self.len()).filter(|&i| self.label_index(i, a) == c).collect())
    }

    /// Copy of `ids` as an `f64` batch with the given binary labels.
    pub fn batch(&self, ids: &[usize], labels: Vec<u8>) -> Result<Batch> {
        if ids.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} sample ids but {} labels",
                ids.len(),
                labels.len()
            )));
        }
        let mut rows = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            if i >= self.len() {
                return Err(Error::contract(format!("sample {i} out of range ({})", self.len())));
            }
            rows.extend(self.activation(i).iter().map(|&v| f64::from(v)));
        }
        Ok(Batch {
            dim: self.dim,
            rows,
            labels,
            ids: ids.to_vec(),
        })
    }

    /// Batch labelled 1 where `attribute == positive_class`, else 0.
    pub fn binary_batch(&self, ids: &[usize], attribute: &str, positive_class: &str) -> Result<Batch> {
        let (a, c) = self.class_index(attribute, positive_class)?;
        let labels = ids.iter().map(|&i| u8::from(self.label_index(i, a) == c)).collect();
        self.batch(ids, labels)
    }
}

/// Dense `f64` copy of selected samples with binary labels.
///
/// `ids` records which store samples the rows came from, so partitions can
/// be checked for disjointness by identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<u8>,
    ids: Vec<usize>,
}

impl Batch {
    /// Batch from raw rows; `ids` defaults to `0..n`.
    pub fn from_rows(dim: usize, rows: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || rows.len() != labels.len() * dim {
            return Err(Error::contract(format!(
                "batch of {} values does not hold {} rows of dim {dim}",
                rows.len(),
                labels.len()
            )));
        }
        let ids = (0..labels.len()).collect();
        Ok(Self { dim, rows, labels, ids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.rows.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Rows with label 1 and rows with label 0, as separate batches.
    pub fn split_by_label(&self) -> (Batch, Batch) {
        let pick = |want: u8| {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == want).collect();
            self.select(&idx)
        };
        (pick(1), pick(0))
    }

    /// Rows at the given batch positions.
    pub fn select(&self, positions: &[usize]) -> Batch {
        let mut rows = Vec::with_capacity(positions.len() * self.dim);
        for &p in positions {
            rows.extend_from_slice(self.row(p));
        }
        Batch {
            dim: self.dim,
            rows,
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
        }
    }

    /// Same samples with rows replaced (used for ablated copies).
    pub fn with_rows(&self, rows: Vec<f64>) -> Result<Batch> {
        if rows.len() != self.rows.len() {
            return Err(Error::contract("replacement rows have the wrong size"));
        }
        Ok(Batch {
            dim: self.dim,
            rows,
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        })
    }

    /// Seeded shuffle of row positions.
    pub fn shuffled_positions(&self, rng: &mut Rng) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ActivationStore {
        ActivationStore::from_parts(
            2,
            0,
            vec![Attribute::new("color", &["red", "blue"])],
            vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0],
            vec![0, 1, 0],
            vec![],
            None,
        )
        .unwrap()
    }

    #[test]
    fn accessors() {
        let s = tiny();
        assert_eq!(s.len(), 3);
        assert_eq!(s.label(1, "color").unwrap(), "blue");
        assert_eq!(s.samples_with("color", "red").unwrap(), vec![0, 2]);
        let b = s.binary_batch(&[0, 1, 2], "color", "red").unwrap();
        assert_eq!(b.labels(), &[1, 0, 1]);
        assert_eq!(b.row(2), &[2.0, 0.0]);
        let (pos, neg) = b.split_by_label();
        assert_eq!(pos.ids(), &[0, 2]);
        assert_eq!(neg.ids(), &[1]);
    }

    #[test]
    fn invariants_are_enforced() {
        let attrs = vec![Attribute::new("color", &["red", "blue"])];
        assert!(ActivationStore::from_parts(2, 0, attrs.clone(), vec![1.0; 3], vec![0], vec![], None).is_err());
        assert!(ActivationStore::from_parts(2, 0, attrs.clone(), vec![1.0; 2], vec![2], vec![], None).is_err());
        let proj = TokenProjection {
            vocab: vec!["a".into()],
            matrix: vec![1.0; 3],
        };
        assert!(ActivationStore::from_parts(2, 0, attrs, vec![1.0; 2], vec![0], vec![], Some(proj)).is_err());
    }

    #[test]
    fn unknown_class_is_a_data_error() {
        assert!(matches!(tiny().samples_with("color", "green"), Err(Error::Data(_))));
        assert!(matches!(tiny().attribute("shape"), Err(Error::Data(_))));
    }
}
