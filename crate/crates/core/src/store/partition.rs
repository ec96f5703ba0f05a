// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset partitions for the two evaluations.

use serde::{Deserialize, Serialize};

use super::{ActivationStore, Batch};
use crate::error::{Error, Result};
use crate::numcore::Rng;

/// One SCR task: a desired attribute restricted to two classes, confounded
/// with a spurious attribute restricted to two classes. The aligned
/// combinations are `(desired[0], spurious[0])` and `(desired[1], spurious[1])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrPair {
    pub desired_attribute: String,
    pub desired_classes: [String; 2],
    pub spurious_attribute: String,
    pub spurious_classes: [String; 2],
}

impl ScrPair {
    pub fn new(
        desired_attribute: &str,
        desired_classes: [&str; 2],
        spurious_attribute: &str,
        spurious_classes: [&str; 2],
    ) -> Self {
        Self {
            desired_attribute: desired_attribute.to_owned(),
            desired_classes: desired_classes.map(str::to_owned),
            spurious_attribute: spurious_attribute.to_owned(),
            spurious_classes: spurious_classes.map(str::to_owned),
        }
    }

    /// Short identifier such as `professor/nurse~male/female`.
    pub fn label(&self) -> String {
        format!(
            "{}/{}~{}/{}",
            self.desired_classes[0], self.desired_classes[1], self.spurious_classes[0], self.spurious_classes[1]
        )
    }
}

/// Requested partition sizes; each is capped by what the store holds,
/// except `eval_size`, which must be met exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrPartitionSizes {
    /// Balanced evaluation set, split evenly over the four cells.
    pub eval_size: usize,
    /// Biased training set, split evenly over the two aligned cells.
    pub biased_train_size: usize,
    /// Balanced training set for the oracle and spurious probes.
    pub balanced_train_size: usize,
}

impl Default for ScrPartitionSizes {
    fn default() -> Self {
        Self {
            eval_size: 1000,
            biased_train_size: 4000,
            balanced_train_size: 4000,
        }
    }
}

/// Sample ids for one SCR task. The three sets are pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrPartition {
    pub pair: ScrPair,
    /// Only the two aligned combinations, in equal numbers.
    pub biased_train: Vec<usize>,
    /// All four combinations in equal numbers; trains the oracle and spurious probes.
    pub balanced_train: Vec<usize>,
    /// All four combinations in equal numbers; held out from every probe.
    pub balanced_eval: Vec<usize>,
}

impl ScrPartition {
    /// Batch labelled for the desired attribute (1 = `desired_classes[0]`).
    pub fn desired_batch(&self, store: &ActivationStore, ids: &[usize]) -> Result<Batch> {
        store.binary_batch(ids, &self.pair.desired_attribute, &self.pair.desired_classes[0])
    }

    /// Batch labelled for the spurious attribute (1 = `spurious_classes[0]`).
    pub fn spurious_batch(&self, store: &ActivationStore, ids: &[usize]) -> Result<Batch> {
        store.binary_batch(ids, &self.pair.spurious_attribute, &self.pair.spurious_classes[0])
    }
}

/// Build the biased/balanced split for one SCR task.
pub fn partition_scr(store: &ActivationStore, pair: &ScrPair, sizes: &ScrPartitionSizes) -> Result<ScrPartition> {
    if pair.desired_attribute == pair.spurious_attribute {
        return Err(Error::data("desired and spurious attributes must differ"));
    }
    let (da, d0) = store.class_index(&pair.desired_attribute, &pair.desired_classes[0])?;
    let (_, d1) = store.class_index(&pair.desired_attribute, &pair.desired_classes[1])?;
    let (sa, s0) = store.class_index(&pair.spurious_attribute, &pair.spurious_classes[0])?;
    let (_, s1) = store.class_index(&pair.spurious_attribute, &pair.spurious_classes[1])?;
    if d0 == d1 || s0 == s1 {
        return Err(Error::data(format!(
            "class pair of {} must name two different classes",
            pair.label()
        )));
    }

    // cells[2 * d + s]
    let mut cells: [Vec<usize>; 4] = Default::default();
    for i in 0..store.len() {
        let d = store.label_index(i, da);
        let s = store.label_index(i, sa);
        let dk = if d == d0 {
            0
        } else if d == d1 {
            1
        } else {
            continue;
        };
        let sk = if s == s0 {
            0
        } else if s == s1 {
            1
        } else {
            continue;
        };
        cells[2 * dk + sk].push(i);
    }
    let mut rng = Rng::derive(store.seed(), &format!("scr:{}", pair.label()));
    for c in cells.iter_mut() {
        rng.shuffle(c);
    }
    let counts = cells.each_ref().map(Vec::len);
    let describe = || {
        format!(
            "cell counts for {}: ({0},{2})={4} ({0},{3})={5} ({1},{2})={6} ({1},{3})={7}",
            pair.desired_classes[0],
            pair.desired_classes[1],
            pair.spurious_classes[0],
            pair.spurious_classes[1],
            counts[0],
            counts[1],
            counts[2],
            counts[3],
        )
    };

    let per_eval = sizes.eval_size / 4;
    if per_eval == 0 || counts.iter().any(|&c| c < per_eval) {
        return Err(Error::data(format!(
            "balanced eval of {} needs {per_eval} samples per cell; {}",
            sizes.eval_size,
            describe()
        )));
    }
    let mut cursor = [per_eval; 4];
    let balanced_eval: Vec<usize> = cells.iter().flat_map(|c| c[..per_eval].iter().copied()).collect();

    // Balanced training data is reserved first; aligned cells keep at least
    // half of what remains for the biased set.
    let per_balanced = (0..4)
        .map(|k| {
            let rem = counts[k] - cursor[k];
            if k == 0 || k == 3 {
                rem / 2
            } else {
                rem
            }
        })
        .min()
        .unwrap_or(0)
        .min(sizes.balanced_train_size / 4);
    if per_balanced == 0 {
        return Err(Error::data(format!(
            "no samples left for the balanced training set; {}",
            describe()
        )));
    }
    let mut balanced_train = Vec::with_capacity(4 * per_balanced);
    for k in 0..4 {
        balanced_train.extend_from_slice(&cells[k][cursor[k]..cursor[k] + per_balanced]);
        cursor[k] += per_balanced;
    }

    let per_biased = (sizes.biased_train_size / 2)
        .min(counts[0] - cursor[0])
        .min(counts[3] - cursor[3]);
    if per_biased == 0 {
        return Err(Error::data(format!(
            "no samples left for the biased training set; {}",
            describe()
        )));
    }
    let mut biased_train = Vec::with_capacity(2 * per_biased);
    for k in [0, 3] {
        biased_train.extend_from_slice(&cells[k][cursor[k]..cursor[k] + per_biased]);
    }

    Ok(ScrPartition {
        pair: pair.clone(),
        biased_train,
        balanced_train,
        balanced_eval,
    })
}

/// One-vs-rest sample ids for a TPP class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TppPartition {
    pub attribute: String,
    pub target_class: String,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TppPartition {
    /// Positives labelled 1 followed by negatives labelled 0.
    pub fn batch(&self, store: &ActivationStore) -> Result<Batch> {
        let ids: Vec<usize> = self.positives.iter().chain(&self.negatives).copied().collect();
        let labels = std::iter::repeat_n(1u8, self.positives.len())
            .chain(std::iter::repeat_n(0u8, self.negatives.len()))
            .collect();
        store.batch(&ids, labels)
    }
}

/// Samples of `target_class` against an equal number drawn uniformly over
/// the other classes of `attribute`.
pub fn partition_tpp(
    store: &ActivationStore,
    attribute: &str,
    target_class: &str,
    eval_size: usize,
) -> Result<TppPartition> {
    let (a, attr) = store.attribute(attribute)?;
    if attr.classes.len() < 2 {
        return Err(Error::data(format!("attribute {attribute} needs at least 2 classes")));
    }
    let (_, target) = store.class_index(attribute, target_class)?;
    let mut rng = Rng::derive(store.seed(), &format!("tpp:{attribute}:{target_class}"));
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); attr.classes.len()];
    for i in 0..store.len() {
        pools[store.label_index(i, a)].push(i);
    }
    for p in pools.iter_mut() {
        rng.shuffle(p);
    }
    let half = eval_size / 2;
    let mut positives = std::mem::take(&mut pools[target]);
    if positives.is_empty() {
        return Err(Error::data(format!(
            "class {target_class} of {attribute} has no samples"
        )));
    }
    positives.truncate(half);
    let mut others: Vec<Vec<usize>> = pools
        .into_iter()
        .enumerate()
        .filter(|&(c, _)| c != target)
        .map(|(_, p)| p)
        .collect();
    let mut negatives = Vec::with_capacity(positives.len());
    while negatives.len() < positives.len() {
        let live: Vec<usize> = (0..others.len()).filter(|&k| !others[k].is_empty()).collect();
        if live.is_empty() {
            return Err(Error::data(format!(
                "only {} non-{target_class} samples for {} positives",
                negatives.len(),
                positives.len()
            )));
        }
        let k = live[rng.below(live.len())];
        negatives.push(others[k].pop().expect("non-empty"));
    }
    Ok(TppPartition {
        attribute: attribute.to_owned(),
        target_class: target_class.to_owned(),
        positives,
        negatives,
    })
}

/// Deterministic 80/20-style split of batch positions by seeded shuffle.
pub fn split_train_eval(len: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    Rng::new(seed).shuffle(&mut idx);
    let cut = ((len as f64) * train_fraction).round() as usize;
    let eval = idx.split_off(cut.min(len));
    (idx, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{generate_synthetic, Attribute, SyntheticSpec};
    use std::collections::{BTreeMap, BTreeSet};

    fn store(n: usize, classes: &[&str]) -> ActivationStore {
        let spec = SyntheticSpec {
            dim: 16,
            num_ground_truth_features: 2 * (classes.len() + 2) + 2,
            features_per_concept: 2,
            noise_sigma: 0.0,
            attributes: vec![
                Attribute::new("profession", classes),
                Attribute::new("gender", &["male", "female"]),
            ],
            correlation: 0.0,
            num_samples: n,
            seed: 9,
            background_rate: 0.2,
            context_samples: 0,
            token_projection: false,
            signal_scale: BTreeMap::new(),
        };
        generate_synthetic(&spec).unwrap().0
    }

    fn pair() -> ScrPair {
        ScrPair::new("profession", ["professor", "nurse"], "gender", ["male", "female"])
    }

    fn combos(s: &ActivationStore, ids: &[usize]) -> BTreeMap<(String, String), usize> {
        let mut m = BTreeMap::new();
        for &i in ids {
            let key = (
                s.label(i, "profession").unwrap().to_owned(),
                s.label(i, "gender").unwrap().to_owned(),
            );
            *m.entry(key).or_default() += 1;
        }
        m
    }

    #[test]
    fn scr_partition_cells() {
        let s = store(4000, &["professor", "nurse", "architect", "journalist"]);
        let sizes = ScrPartitionSizes {
            eval_size: 200,
            ..Default::default()
        };
        let p = partition_scr(&s, &pair(), &sizes).unwrap();
        let biased = combos(&s, &p.biased_train);
        assert_eq!(biased.len(), 2);
        assert!(biased.contains_key(&("professor".into(), "male".into())));
        assert!(biased.contains_key(&("nurse".into(), "female".into())));
        let eval = combos(&s, &p.balanced_eval);
        assert_eq!(eval.len(), 4);
        assert!(eval.values().all(|&c| c == 50));
        let bal = combos(&s, &p.balanced_train);
        assert_eq!(bal.len(), 4);
        assert_eq!(bal.values().collect::<BTreeSet<_>>().len(), 1);

        let e: BTreeSet<_> = p.balanced_eval.iter().collect();
        let b: BTreeSet<_> = p.biased_train.iter().collect();
        let t: BTreeSet<_> = p.balanced_train.iter().collect();
        assert!(e.is_disjoint(&b) && e.is_disjoint(&t) && b.is_disjoint(&t));
    }

    #[test]
    fn scr_missing_class_and_thin_cells_are_data_errors() {
        let s = store(400, &["professor", "nurse", "architect"]);
        let bad = ScrPair::new("profession", ["professor", "dentist"], "gender", ["male", "female"]);
        assert!(matches!(
            partition_scr(&s, &bad, &Default::default()),
            Err(Error::Data(_))
        ));
        let sizes = ScrPartitionSizes {
            eval_size: 4000,
            ..Default::default()
        };
        match partition_scr(&s, &pair(), &sizes) {
            Err(Error::Data(msg)) => assert!(msg.contains("cell counts"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tpp_partition_mixes_other_classes() {
        let s = store(4000, &["professor", "nurse", "architect", "journalist"]);
        let p = partition_tpp(&s, "profession", "nurse", 200).unwrap();
        assert_eq!(p.positives.len(), 100);
        assert_eq!(p.negatives.len(), 100);
        assert!(p
            .positives
            .iter()
            .all(|&i| s.label(i, "profession").unwrap() == "nurse"));
        let mut per = BTreeMap::new();
        for &i in &p.negatives {
            *per.entry(s.label(i, "profession").unwrap().to_owned()).or_insert(0) += 1;
        }
        assert_eq!(per.len(), 3);
        assert!(!per.contains_key("nurse"));
        for &c in per.values() {
            assert!((15..=55).contains(&c), "{per:?}");
        }
        assert_eq!(partition_tpp(&s, "profession", "nurse", 200).unwrap(), p);
    }

    #[test]
    fn tpp_two_class_negatives_come_from_the_other_class() {
        let s = store(400, &["professor", "nurse", "architect"]);
        let p = partition_tpp(&s, "gender", "female", 100).unwrap();
        assert!(p.negatives.iter().all(|&i| s.label(i, "gender").unwrap() == "male"));
        let b = p.batch(&s).unwrap();
        assert_eq!(b.labels().iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn tpp_unknown_class_is_rejected() {
        let s = store(100, &["professor", "nurse", "architect"]);
        assert!(partition_tpp(&s, "profession", "dentist", 10).is_err());
    }

    #[test]
    fn train_eval_split_is_deterministic() {
        let (a, b) = split_train_eval(100, 0.8, 4);
        assert_eq!(a.len(), 80);
        assert_eq!(b.len(), 20);
        assert_eq!(split_train_eval(100, 0.8, 4), (a, b));
    }
}
