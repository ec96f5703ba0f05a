// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct-effect attribution of SAE latents to a probe.
//!
//! For latent `a` with decoder direction `d_a`, probe weights `P`, and mean
//! activations `mean_pos(f_a)`, `mean_neg(f_a)` over positive and negative
//! samples:
//!
//! ```text
//! I(a) = (d_a · P) * (mean_pos(f_a) - mean_neg(f_a))
//! ```
//!
//! Because the probe is linear and the probe layer coincides with the SAE
//! layer, `I(a)` is exactly the change in the mean logit gap between the two
//! classes when latent `a`'s decoder contribution is removed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{argsort_desc, dot};
use crate::probes::LinearProbe;
use crate::sae::SaeModel;
use crate::store::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub scores: Vec<f64>,
    pub pos_means: Vec<f64>,
    pub neg_means: Vec<f64>,
    pub probe_id: String,
    pub sae_id: String,
}

/// Ranking key for [`select_latents`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Rank by `|I(a)|` (used for SCR).
    Absolute,
    /// Rank by `I(a)` (used for TPP).
    Signed,
}

/// Latents chosen for ablation, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSet {
    pub indices: Vec<usize>,
    /// Attribution score of each selected latent, aligned with `indices`.
    pub scores: Vec<f64>,
    pub mode: SelectionMode,
    pub n: usize,
}

impl LatentSet {
    pub fn empty(mode: SelectionMode) -> Self {
        Self {
            indices: Vec::new(),
            scores: Vec::new(),
            mode,
            n: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Keep only the entries for which `keep(index)` holds, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        let (indices, scores) = self
            .indices
            .iter()
            .zip(&self.scores)
            .filter(|(i, _)| keep(**i))
            .map(|(i, s)| (*i, *s))
            .unzip();
        Self {
            indices,
            scores,
            mode: self.mode,
            n: self.n,
        }
    }
}

fn mean_codes(sae: &SaeModel, batch: &Batch) -> Result<Vec<f64>> {
    let codes = sae.encode_batch(batch)?;
    let k = sae.dict_size();
    let mut mean = vec![0.0; k];
    for row in codes.chunks_exact(k) {
        for (m, f) in mean.iter_mut().zip(row) {
            *m += f;
        }
    }
    let n = batch.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Attribution score of every latent of `sae` on `probe`.
pub fn attribution_scores(
    sae: &SaeModel,
    probe: &LinearProbe,
    positives: &Batch,
    negatives: &Batch,
) -> Result<AttributionResult> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::contract(
            "attribution needs non-empty positive and negative batches",
        ));
    }
    if probe.dim() != sae.dim() {
        return Err(Error::contract(format!(
            "probe dim {} != SAE dim {}",
            probe.dim(),
            sae.dim()
        )));
    }
    let pos_means = mean_codes(sae, positives)?;
    let neg_means = mean_codes(sae, negatives)?;
    let scores = (0..sae.dict_size())
        .map(|a| dot(sae.decoder_direction(a), &probe.weights) * (pos_means[a] - neg_means[a]))
        .collect();
    Ok(AttributionResult {
        scores,
        pos_means,
        neg_means,
        probe_id: probe.trained_on.id(),
        sae_id: sae.id(),
    })
}

/// Top-`n` latents under `mode`; ties go to the lower index. `n = 0` yields
/// an empty set and `n` beyond the dictionary yields every latent.
pub fn select_latents(result: &AttributionResult, mode: SelectionMode, n: usize) -> LatentSet {
    let keys: Vec<f64> = match mode {
        SelectionMode::Absolute => result.scores.iter().map(|s| s.abs()).collect(),
        SelectionMode::Signed => result.scores.clone(),
    };
    let mut indices = argsort_desc(&keys);
    indices.truncate(n);
    LatentSet {
        scores: indices.iter().map(|&i| result.scores[i]).collect(),
        indices,
        mode,
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(scores: Vec<f64>) -> AttributionResult {
        AttributionResult {
            pos_means: vec![0.0; scores.len()],
            neg_means: vec![0.0; scores.len()],
            scores,
            probe_id: String::new(),
            sae_id: String::new(),
        }
    }

    #[test]
    fn selection_orders() {
        let r = result(vec![3.0, -5.0, 1.0]);
        assert_eq!(select_latents(&r, SelectionMode::Absolute, 2).indices, vec![1, 0]);
        assert_eq!(select_latents(&r, SelectionMode::Signed, 2).indices, vec![0, 2]);
        assert_eq!(select_latents(&r, SelectionMode::Signed, 10).indices.len(), 3);
        assert!(select_latents(&r, SelectionMode::Signed, 0).is_empty());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let r = result(vec![1.0, -2.0, 2.0, 2.0]);
        assert_eq!(select_latents(&r, SelectionMode::Absolute, 3).indices, vec![1, 2, 3]);
        assert_eq!(select_latents(&r, SelectionMode::Signed, 2).indices, vec![2, 3]);
    }

    #[test]
    fn retain_preserves_order() {
        let r = result(vec![4.0, 3.0, 2.0, 1.0]);
        let s = select_latents(&r, SelectionMode::Signed, 4).retain(|i| i % 2 == 1);
        assert_eq!(s.indices, vec![1, 3]);
        assert_eq!(s.scores, vec![3.0, 1.0]);
    }
}
