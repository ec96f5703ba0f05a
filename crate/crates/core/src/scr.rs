// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spurious correlation removal (SCR).
//!
//! A probe `C_b` is trained to detect the desired concept on a biased split
//! where the spurious concept is perfectly aligned with it, so `C_b` picks
//! up both signals. Latents tied to the spurious signal are then
//! zero-ablated and `C_b` is re-scored on balanced data:
//!
//! ```text
//! S_SHIFT = (A_abl - A_base) / (A_oracle - A_base)
//! ```
//!
//! where `A_base` is `C_b`'s desired-concept accuracy before ablation,
//! `A_abl` after, and `A_oracle` that of a probe trained on balanced data.
//!
//! Ablation subtracts the ablated latents' decoder contributions from the
//! input, `x' = x - sum_a f_a(x) d_a`, keeping the SAE reconstruction error.

use serde::{Deserialize, Serialize};

use crate::attribution::{attribution_scores, select_latents, LatentSet, SelectionMode};
use crate::error::{Error, Result};
use crate::judge::{filter_latents_scr, judge_latents, Judge, StoreEvidence};
use crate::numcore::Rng;
use crate::probes::{probe_accuracy, train_probe, LinearProbe, ProbeConfig, ProbeRole, ProbeTag};
use crate::sae::SaeModel;
use crate::store::{partition_scr, ActivationStore, Batch, ScrPair, ScrPartitionSizes};

/// How ablation latents are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScrMethod {
    /// Top latents by `|I|` against a probe trained on the spurious concept.
    SpuriousInformed,
    /// Top latents by `|I|` against `C_b`, keeping those the judge scores
    /// unrelated to the desired concept.
    JudgeFiltered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScrConfig {
    pub pairs: Vec<ScrPair>,
    pub method: ScrMethod,
    pub n_sweep: Vec<usize>,
    pub sizes: ScrPartitionSizes,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for ScrConfig {
    fn default() -> Self {
        Self {
            pairs: default_pairs(),
            method: ScrMethod::SpuriousInformed,
            n_sweep: default_n_sweep(),
            sizes: ScrPartitionSizes::default(),
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

/// Latent counts evaluated by default.
pub fn default_n_sweep() -> Vec<usize> {
    vec![2, 5, 10, 20, 50]
}

/// Profession/gender pairs of the synthetic suite.
pub fn default_pairs() -> Vec<ScrPair> {
    vec![
        ScrPair::new("profession", ["professor", "nurse"], "gender", ["male", "female"]),
        ScrPair::new("profession", ["architect", "journalist"], "gender", ["male", "female"]),
    ]
}

/// A batch together with its SAE codes, for repeated ablations.
pub struct EncodedBatch<'a> {
    sae: &'a SaeModel,
    batch: &'a Batch,
    codes: Vec<f64>,
}

impl<'a> EncodedBatch<'a> {
    pub fn new(sae: &'a SaeModel, batch: &'a Batch) -> Result<Self> {
        Ok(Self {
            codes: sae.encode_batch(batch)?,
            sae,
            batch,
        })
    }

    /// Rows with the given latents' decoder contributions removed.
    pub fn ablated(&self, latents: &[usize]) -> Result<Batch> {
        let k = self.sae.dict_size();
        if let Some(bad) = latents.iter().find(|&&a| a >= k) {
            return Err(Error::contract(format!(
                "latent {bad} out of range for dictionary of {k}"
            )));
        }
        let d = self.batch.dim();
        let mut rows = Vec::with_capacity(self.batch.len() * d);
        for (i, x) in self.batch.rows().enumerate() {
            let mut out = x.to_vec();
            let f = &self.codes[i * k..(i + 1) * k];
            for &a in latents {
                if f[a] != 0.0 {
                    for (o, v) in out.iter_mut().zip(self.sae.decoder_direction(a)) {
                        *o -= f[a] * v;
                    }
                }
            }
            rows.extend(out);
        }
        self.batch.with_rows(rows)
    }

    /// Accuracy of `probe` after ablating `latents`; an empty set is scored
    /// on the untouched batch.
    pub fn accuracy(&self, probe: &LinearProbe, latents: &[usize]) -> Result<f64> {
        if latents.is_empty() {
            return probe_accuracy(probe, self.batch);
        }
        probe_accuracy(probe, &self.ablated(latents)?)
    }
}

/// Accuracy of `probe` on `eval` after zero-ablating `latents`.
pub fn ablated_probe_eval(sae: &SaeModel, probe: &LinearProbe, latents: &LatentSet, eval: &Batch) -> Result<f64> {
    if sae.dim() != probe.dim() || sae.dim() != eval.dim() {
        return Err(Error::contract("SAE, probe and batch dimensions differ"));
    }
    EncodedBatch::new(sae, eval)?.accuracy(probe, &latents.indices)
}

/// Normalized SCR score; `None` when `a_oracle <= a_base`.
pub fn shift_score(a_abl: f64, a_base: f64, a_oracle: f64) -> Option<f64> {
    (a_oracle > a_base).then(|| (a_abl - a_base) / (a_oracle - a_base))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrNResult {
    pub n: usize,
    /// Ablated latents (after judge filtering, when used).
    pub latents: Vec<usize>,
    /// Latents dropped because the judge returned no valid verdict.
    pub errored: Vec<usize>,
    pub a_abl: f64,
    pub s_shift: Option<f64>,
    pub s_shift_clipped: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrPairResult {
    pub pair: String,
    pub a_base: f64,
    pub a_oracle: f64,
    /// `C_b`'s accuracy at predicting the spurious concept on balanced data.
    pub a_base_spurious: f64,
    /// Set when `A_oracle <= A_base`; the pair is then left out of the means.
    pub degenerate: Option<String>,
    pub per_n: Vec<ScrNResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrMean {
    pub n: usize,
    /// Mean over non-degenerate pairs; `None` if there are none.
    pub s_shift: Option<f64>,
    pub s_shift_clipped: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrReport {
    pub sae_id: String,
    pub method: ScrMethod,
    pub pairs: Vec<ScrPairResult>,
    pub means: Vec<ScrMean>,
}

impl ScrReport {
    pub fn mean_at(&self, n: usize) -> Option<f64> {
        self.means.iter().find(|m| m.n == n).and_then(|m| m.s_shift)
    }
}

/// Concepts shown to the judge for a pair: the spurious attribute, then the
/// two desired classes.
pub fn judge_concepts(pair: &ScrPair) -> (Vec<String>, Vec<String>) {
    let desired = pair.desired_classes.to_vec();
    let mut all = vec![pair.spurious_attribute.clone()];
    all.extend(desired.iter().cloned());
    (all, desired)
}

/// Run SCR for every configured pair.
///
/// `judge` is required for [`ScrMethod::JudgeFiltered`] and ignored otherwise.
pub fn run_scr(
    store: &ActivationStore,
    sae: &SaeModel,
    config: &ScrConfig,
    judge: Option<(&Judge, bool)>,
) -> Result<ScrReport> {
    if config.pairs.is_empty() || config.n_sweep.is_empty() {
        return Err(Error::config("SCR needs at least one class pair and one N"));
    }
    if config.method == ScrMethod::JudgeFiltered && judge.is_none() {
        return Err(Error::config("judge-filtered SCR needs a judge"));
    }
    let evidence = match config.method {
        ScrMethod::JudgeFiltered => Some(StoreEvidence::new(sae, store)?),
        ScrMethod::SpuriousInformed => None,
    };
    let mut pairs = Vec::with_capacity(config.pairs.len());
    for pair in &config.pairs {
        let label = pair.label();
        let seed = |role: &str| Rng::derive_seed(config.seed, &format!("scr:{role}:{label}"));
        let part = partition_scr(store, pair, &config.sizes)?;
        let [d0, d1] = &pair.desired_classes;
        let [s0, s1] = &pair.spurious_classes;
        let biased = part.desired_batch(store, &part.biased_train)?;
        let balanced_desired = part.desired_batch(store, &part.balanced_train)?;
        let balanced_spurious = part.spurious_batch(store, &part.balanced_train)?;
        let eval = part.desired_batch(store, &part.balanced_eval)?;
        let eval_spurious = part.spurious_batch(store, &part.balanced_eval)?;

        let attr = &pair.desired_attribute;
        let c_b = train_probe(
            &biased,
            &config.probe,
            seed("biased"),
            ProbeTag::new(attr, d0, d1, ProbeRole::Biased),
        )?;
        let oracle = train_probe(
            &balanced_desired,
            &config.probe,
            seed("oracle"),
            ProbeTag::new(attr, d0, d1, ProbeRole::DesiredOracle),
        )?;
        let a_base = probe_accuracy(&c_b, &eval)?;
        let a_oracle = probe_accuracy(&oracle, &eval)?;
        let a_base_spurious = probe_accuracy(&c_b, &eval_spurious)?;
        let degenerate = (a_oracle <= a_base)
            .then(|| format!("A_oracle {a_oracle:.4} <= A_base {a_base:.4}; pair excluded from means"));

        let max_n = config.n_sweep.iter().copied().max().unwrap_or(0);
        let (ranked, verdicts) = match config.method {
            ScrMethod::SpuriousInformed => {
                let spurious = train_probe(
                    &balanced_spurious,
                    &config.probe,
                    seed("spurious"),
                    ProbeTag::new(&pair.spurious_attribute, s0, s1, ProbeRole::Spurious),
                )?;
                let (pos, neg) = balanced_spurious.split_by_label();
                let scores = attribution_scores(sae, &spurious, &pos, &neg)?;
                (select_latents(&scores, SelectionMode::Absolute, max_n), None)
            }
            ScrMethod::JudgeFiltered => {
                let (pos, neg) = biased.split_by_label();
                let scores = attribution_scores(sae, &c_b, &pos, &neg)?;
                let ranked = select_latents(&scores, SelectionMode::Absolute, max_n);
                let (judge, _) = judge.expect("checked above");
                let (concepts, _) = judge_concepts(pair);
                let provider = evidence.as_ref().expect("built for judge method");
                let verdicts = judge_latents(&ranked, provider, &concepts, judge)?;
                (ranked, Some(verdicts))
            }
        };

        let encoded = EncodedBatch::new(sae, &eval)?;
        let mut per_n = Vec::with_capacity(config.n_sweep.len());
        for &n in &config.n_sweep {
            let top = LatentSet {
                indices: ranked.indices.iter().take(n).copied().collect(),
                scores: ranked.scores.iter().take(n).copied().collect(),
                mode: SelectionMode::Absolute,
                n,
            };
            let (chosen, errored) = match &verdicts {
                Some(v) => {
                    let (_, desired) = judge_concepts(pair);
                    let spurious_concept = [pair.spurious_attribute.clone()];
                    let require = judge.is_some_and(|(_, r)| r).then_some(&spurious_concept[..]);
                    let out = filter_latents_scr(&top, v, &desired, require)?;
                    (out.kept, out.errored)
                }
                None => (top, Vec::new()),
            };
            let a_abl = encoded.accuracy(&c_b, &chosen.indices)?;
            let s_shift = if degenerate.is_some() {
                None
            } else {
                shift_score(a_abl, a_base, a_oracle)
            };
            per_n.push(ScrNResult {
                n,
                latents: chosen.indices,
                errored,
                a_abl,
                s_shift,
                s_shift_clipped: s_shift.map(|s| s.clamp(0.0, 1.0)),
            });
        }
        pairs.push(ScrPairResult {
            pair: label,
            a_base,
            a_oracle,
            a_base_spurious,
            degenerate,
            per_n,
        });
    }
    let means = config
        .n_sweep
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let raw: Vec<f64> = pairs.iter().filter_map(|p| p.per_n[k].s_shift).collect();
            let clipped: Vec<f64> = pairs.iter().filter_map(|p| p.per_n[k].s_shift_clipped).collect();
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            ScrMean {
                n,
                s_shift: mean(&raw),
                s_shift_clipped: mean(&clipped),
            }
        })
        .collect();
    Ok(ScrReport {
        sae_id: sae.id(),
        method: config.method,
        pairs,
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::SaeKind;
    use crate::store::{generate_synthetic, SyntheticSpec};

    #[test]
    fn shift_score_endpoints() {
        assert_eq!(shift_score(0.7, 0.7, 0.95), Some(0.0));
        assert_eq!(shift_score(0.95, 0.7, 0.95), Some(1.0));
        assert_eq!(shift_score(0.9, 0.95, 0.95), None);
    }

    #[test]
    fn empty_ablation_is_identity() {
        let mut spec = SyntheticSpec::desk_suite(1);
        spec.num_samples = 400;
        let (store, _) = generate_synthetic(&spec).unwrap();
        let sae = SaeModel::random_init(SaeKind::TopK { k: 4 }, 32, 8, 0).unwrap();
        let ids: Vec<usize> = (0..200).collect();
        let batch = store.binary_batch(&ids, "gender", "female").unwrap();
        let probe = train_probe(
            &batch,
            &ProbeConfig::default(),
            0,
            ProbeTag::new("gender", "female", "male", ProbeRole::Custom),
        )
        .unwrap();
        let empty = LatentSet::empty(SelectionMode::Absolute);
        assert_eq!(
            ablated_probe_eval(&sae, &probe, &empty, &batch).unwrap(),
            probe_accuracy(&probe, &batch).unwrap()
        );
        let bad = LatentSet {
            indices: vec![256],
            scores: vec![0.0],
            mode: SelectionMode::Absolute,
            n: 1,
        };
        assert!(matches!(
            ablated_probe_eval(&sae, &probe, &bad, &batch),
            Err(Error::Contract(_))
        ));
    }
}
