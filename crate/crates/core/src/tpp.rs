// SPDX-License-Identifier: MIT OR Apache-2.0

//! Targeted probe perturbation (TPP).
//!
//! One one-vs-rest probe `C_j` is trained per class of an attribute. For each
//! class `i` the top-`N` latents by signed attribution on `C_i` form `L_i`.
//! `A_{i,j}` is the held-out accuracy of `C_j` with `L_i` ablated and `A_j`
//! its accuracy without ablation. The score is reported in drop convention:
//!
//! ```text
//! S_TPP = mean_{i=j}(A_j - A_{i,j}) - mean_{i!=j}(A_j - A_{i,j})
//! ```
//!
//! so that a larger value means better isolation. The same expression with
//! `A_{i,j} - A_j` in place of the drops, which is the negation, is kept
//! alongside as `s_tpp_literal`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribution_scores, select_latents, LatentSet, SelectionMode};
use crate::error::{Error, Result};
use crate::judge::{filter_latents_tpp, judge_latents, Judge, StoreEvidence};
use crate::numcore::Rng;
use crate::probes::{probe_accuracy, train_probe, LinearProbe, ProbeConfig, ProbeRole, ProbeTag};
use crate::sae::SaeModel;
use crate::scr::{default_n_sweep, EncodedBatch};
use crate::store::{partition_tpp, split_train_eval, ActivationStore, Batch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TppConfig {
    pub attribute: String,
    pub n_sweep: Vec<usize>,
    /// Samples per one-vs-rest task, half positive and half negative.
    pub task_size: usize,
    pub train_fraction: f64,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for TppConfig {
    fn default() -> Self {
        Self {
            attribute: "profession".to_owned(),
            n_sweep: default_n_sweep(),
            task_size: 4000,
            train_fraction: 0.8,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

/// Accuracies for one `N`: `ablated[i][j]` is probe `j` with class `i`'s
/// latents ablated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TppMatrix {
    pub classes: Vec<String>,
    pub baseline: Vec<f64>,
    pub ablated: Vec<Vec<f64>>,
    pub n: usize,
}

impl TppMatrix {
    pub fn new(classes: Vec<String>, baseline: Vec<f64>, ablated: Vec<Vec<f64>>, n: usize) -> Result<Self> {
        let m = classes.len();
        if m < 2 || baseline.len() != m || ablated.len() != m || ablated.iter().any(|r| r.len() != m) {
            return Err(Error::contract(format!(
                "TPP matrix needs {m} >= 2 classes, {m} baselines and {m}x{m} entries"
            )));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !baseline.iter().all(in_unit) || !ablated.iter().flatten().all(in_unit) {
            return Err(Error::contract("TPP accuracies must lie in [0, 1]"));
        }
        Ok(Self {
            classes,
            baseline,
            ablated,
            n,
        })
    }

    /// `A_j - A_{i,j}`.
    pub fn drop(&self, i: usize, j: usize) -> f64 {
        self.baseline[j] - self.ablated[i][j]
    }

    pub fn diagonal_drops(&self) -> Vec<f64> {
        (0..self.classes.len()).map(|i| self.drop(i, i)).collect()
    }

    pub fn off_diagonal_drops(&self) -> Vec<f64> {
        let m = self.classes.len();
        (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.drop(i, j))
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// TPP score in drop convention (larger is better).
pub fn tpp_score(matrix: &TppMatrix) -> f64 {
    mean(&matrix.diagonal_drops()) - mean(&matrix.off_diagonal_drops())
}

/// The same expression on `A_{i,j} - A_j`; always `-tpp_score`.
pub fn tpp_score_literal(matrix: &TppMatrix) -> f64 {
    -tpp_score(matrix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TppNResult {
    pub matrix: TppMatrix,
    /// `L_i` per class, after judge filtering when used.
    pub latents: Vec<Vec<usize>>,
    /// Latents dropped because the judge returned no valid verdict.
    pub errored: Vec<usize>,
    pub s_tpp: f64,
    pub s_tpp_literal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TppReport {
    pub sae_id: String,
    pub attribute: String,
    pub judge_filtered: bool,
    pub per_n: Vec<TppNResult>,
}

impl TppReport {
    pub fn score_at(&self, n: usize) -> Option<f64> {
        self.per_n.iter().find(|r| r.matrix.n == n).map(|r| r.s_tpp)
    }
}

struct ClassTask {
    probe: LinearProbe,
    train: Batch,
    eval: Batch,
}

fn class_task(store: &ActivationStore, config: &TppConfig, class: &str) -> Result<ClassTask> {
    let seed = |role: &str| Rng::derive_seed(config.seed, &format!("tpp:{role}:{}:{class}", config.attribute));
    let part = partition_tpp(store, &config.attribute, class, config.task_size)?;
    let batch = part.batch(store)?;
    let (train_pos, eval_pos) = split_train_eval(batch.len(), config.train_fraction, seed("split"));
    let train = batch.select(&train_pos);
    let eval = batch.select(&eval_pos);
    let labels_present = |b: &Batch| b.labels().contains(&0) && b.labels().contains(&1);
    if !labels_present(&train) || !labels_present(&eval) {
        return Err(Error::data(format!(
            "class {class} of {} has too few samples for a one-vs-rest split",
            config.attribute
        )));
    }
    let tag = ProbeTag::new(&config.attribute, class, "rest", ProbeRole::OneVsRest);
    let probe = train_probe(&train, &config.probe, seed("probe"), tag)?;
    Ok(ClassTask { probe, train, eval })
}

/// Run TPP over every class of the configured attribute.
///
/// With a judge, each `L_i` keeps only latents scored at least 1 for class `i`.
pub fn run_tpp(
    store: &ActivationStore,
    sae: &SaeModel,
    config: &TppConfig,
    judge: Option<&Judge>,
) -> Result<TppReport> {
    if config.n_sweep.is_empty() {
        return Err(Error::config("TPP needs at least one N"));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::config("train_fraction must lie strictly between 0 and 1"));
    }
    let (_, attr) = store.attribute(&config.attribute)?;
    let classes = attr.classes.clone();
    if classes.len() < 2 {
        return Err(Error::data(format!(
            "attribute {} needs at least 2 classes",
            config.attribute
        )));
    }
    let tasks = classes
        .iter()
        .map(|c| class_task(store, config, c))
        .collect::<Result<Vec<_>>>()?;
    let baseline = tasks
        .iter()
        .map(|t| probe_accuracy(&t.probe, &t.eval))
        .collect::<Result<Vec<_>>>()?;
    let max_n = config.n_sweep.iter().copied().max().unwrap_or(0);
    let ranked = tasks
        .iter()
        .map(|t| {
            let (pos, neg) = t.train.split_by_label();
            let scores = attribution_scores(sae, &t.probe, &pos, &neg)?;
            Ok(select_latents(&scores, SelectionMode::Signed, max_n))
        })
        .collect::<Result<Vec<_>>>()?;

    let verdicts = match judge {
        Some(judge) => {
            let union: BTreeSet<usize> = ranked.iter().flat_map(|r| r.indices.iter().copied()).collect();
            let all = LatentSet {
                scores: vec![0.0; union.len()],
                n: union.len(),
                indices: union.into_iter().collect(),
                mode: SelectionMode::Signed,
            };
            let evidence = StoreEvidence::new(sae, store)?;
            Some(judge_latents(&all, &evidence, &classes, judge)?)
        }
        None => None,
    };

    let encoded = tasks
        .iter()
        .map(|t| EncodedBatch::new(sae, &t.eval))
        .collect::<Result<Vec<_>>>()?;
    let mut per_n = Vec::with_capacity(config.n_sweep.len());
    for &n in &config.n_sweep {
        let mut latents = Vec::with_capacity(classes.len());
        let mut errored = BTreeSet::new();
        for (i, r) in ranked.iter().enumerate() {
            let top = LatentSet {
                indices: r.indices.iter().take(n).copied().collect(),
                scores: r.scores.iter().take(n).copied().collect(),
                mode: SelectionMode::Signed,
                n,
            };
            let chosen = match &verdicts {
                Some(v) => {
                    let out = filter_latents_tpp(&top, v, &classes[i])?;
                    errored.extend(out.errored);
                    out.kept
                }
                None => top,
            };
            latents.push(chosen.indices);
        }
        let ablated = latents
            .iter()
            .map(|l| {
                tasks
                    .iter()
                    .zip(&encoded)
                    .map(|(t, e)| e.accuracy(&t.probe, l))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let matrix = TppMatrix::new(classes.clone(), baseline.clone(), ablated, n)?;
        per_n.push(TppNResult {
            s_tpp: tpp_score(&matrix),
            s_tpp_literal: tpp_score_literal(&matrix),
            matrix,
            latents,
            errored: errored.into_iter().collect(),
        });
    }
    Ok(TppReport {
        sae_id: sae.id(),
        attribute: config.attribute.clone(),
        judge_filtered: judge.is_some(),
        per_n,
    })
}

/// The accuracy matrix at a single `N`.
pub fn tpp_matrix(
    store: &ActivationStore,
    sae: &SaeModel,
    config: &TppConfig,
    n: usize,
    judge: Option<&Judge>,
) -> Result<TppMatrix> {
    let config = TppConfig {
        n_sweep: vec![n],
        ..config.clone()
    };
    let mut report = run_tpp(store, sae, &config, judge)?;
    Ok(report.per_n.remove(0).matrix)
}
