// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-latent evidence shown to the judge: top activating contexts and
//! promoted tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::argsort_desc;
use crate::sae::SaeModel;
use crate::store::ActivationStore;

pub const MAX_CONTEXTS: usize = 5;
pub const MAX_PROMOTED: usize = 5;

/// One context with per-token activations rescaled to integers 0..=10.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceContext {
    pub tokens: Vec<String>,
    pub activations: Vec<u8>,
}

impl EvidenceContext {
    /// Rescale raw activations so the context maximum maps to 10; negative
    /// and zero activations map to 0.
    pub fn from_activations(tokens: Vec<String>, raw: &[f64]) -> Self {
        let max = raw.iter().copied().fold(0.0, f64::max);
        let activations = raw
            .iter()
            .map(|&a| {
                if max > 0.0 && a > 0.0 {
                    (10.0 * a / max).round() as u8
                } else {
                    0
                }
            })
            .collect();
        Self { tokens, activations }
    }

    /// Tokens joined by spaces; tokens with activation `n > 0` are written
    /// as `<<token>>(n)`.
    pub fn render(&self) -> String {
        self.tokens
            .iter()
            .zip(&self.activations)
            .map(|(t, &n)| if n > 0 { format!("<<{t}>>({n})") } else { t.clone() })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentEvidence {
    pub latent: usize,
    /// Sorted by maximum raw activation, descending.
    pub top_contexts: Vec<EvidenceContext>,
    /// Empty when the store has no token projection.
    pub promoted_tokens: Vec<String>,
}

/// Source of evidence for any latent of one SAE.
pub trait EvidenceProvider: Sync {
    fn evidence(&self, latent: usize) -> Result<LatentEvidence>;
}

/// Evidence computed from a store's token contexts and token projection.
pub struct StoreEvidence<'a> {
    sae: &'a SaeModel,
    store: &'a ActivationStore,
    /// Latent codes of every context token, `tokens x dict_size`.
    codes: Vec<f64>,
    /// `(first token row, token count)` per context.
    spans: Vec<(usize, usize)>,
}

impl<'a> StoreEvidence<'a> {
    pub fn new(sae: &'a SaeModel, store: &'a ActivationStore) -> Result<Self> {
        if sae.dim() != store.dim() {
            return Err(Error::contract(format!(
                "SAE dim {} != store dim {}",
                sae.dim(),
                store.dim()
            )));
        }
        let dim = store.dim();
        let mut rows = Vec::new();
        let mut spans = Vec::with_capacity(store.contexts().len());
        for ctx in store.contexts() {
            spans.push((rows.len() / dim, ctx.tokens.len()));
            rows.extend(ctx.token_activations.iter().map(|&v| f64::from(v)));
        }
        let n = rows.len() / dim;
        let batch = crate::store::Batch::from_rows(dim, rows, vec![0; n])?;
        let codes = sae.encode_batch(&batch)?;
        Ok(Self {
            sae,
            store,
            codes,
            spans,
        })
    }
}

impl EvidenceProvider for StoreEvidence<'_> {
    fn evidence(&self, latent: usize) -> Result<LatentEvidence> {
        let k = self.sae.dict_size();
        if latent >= k {
            return Err(Error::contract(format!(
                "latent {latent} out of range for dictionary of {k}"
            )));
        }
        let token_act = |row: usize| self.codes[row * k + latent];
        let maxima: Vec<f64> = self
            .spans
            .iter()
            .map(|&(start, len)| (start..start + len).map(token_act).fold(0.0, f64::max))
            .collect();
        let top_contexts = argsort_desc(&maxima)
            .into_iter()
            .filter(|&c| maxima[c] > 0.0)
            .take(MAX_CONTEXTS)
            .map(|c| {
                let (start, len) = self.spans[c];
                let raw: Vec<f64> = (start..start + len).map(token_act).collect();
                EvidenceContext::from_activations(self.store.contexts()[c].tokens.clone(), &raw)
            })
            .collect();
        let promoted_tokens = match self.store.token_projection() {
            Some(p) => {
                let v = p.vocab.len();
                let dir = self.sae.decoder_direction(latent);
                let logits: Vec<f64> = (0..v)
                    .map(|t| {
                        dir.iter()
                            .enumerate()
                            .map(|(i, d)| d * f64::from(p.matrix[i * v + t]))
                            .sum()
                    })
                    .collect();
                argsort_desc(&logits)
                    .into_iter()
                    .take(MAX_PROMOTED)
                    .map(|t| p.vocab[t].clone())
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(LatentEvidence {
            latent,
            top_contexts,
            promoted_tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{generate_synthetic, SyntheticSpec};

    #[test]
    fn rescaling_maps_max_to_ten() {
        let c = EvidenceContext::from_activations(vec!["a".into(), "b".into(), "c".into()], &[0.2, 0.8, -1.0]);
        assert_eq!(c.activations, vec![3, 10, 0]);
        assert_eq!(c.render(), "<<a>>(3) <<b>>(10) c");
    }

    #[test]
    fn oracle_latent_evidence_names_its_concept() {
        let mut spec = SyntheticSpec::desk_suite(2);
        spec.num_samples = 500;
        spec.context_samples = 200;
        spec.token_projection = true;
        let (store, truth) = generate_synthetic(&spec).unwrap();
        let sae = SaeModel::oracle(&truth, 256, 0).unwrap();
        let provider = StoreEvidence::new(&sae, &store).unwrap();
        let concept = truth.concept("profession", "nurse").unwrap();
        let ev = provider.evidence(concept.features[0]).unwrap();
        assert_eq!(ev.top_contexts.len(), MAX_CONTEXTS);
        for ctx in &ev.top_contexts {
            let lit: Vec<&String> = ctx
                .tokens
                .iter()
                .zip(&ctx.activations)
                .filter(|(_, &n)| n > 0)
                .map(|(t, _)| t)
                .collect();
            assert_eq!(lit, vec!["nurse"]);
        }
        assert_eq!(ev.promoted_tokens[0], "nurse");
        assert!(provider.evidence(256).is_err());
    }
}
