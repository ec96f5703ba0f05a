// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-module properties: attribution covariance, oracle recovery,
//! partition disjointness, judge filtering and probe rescaling.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use saeval::attribution::{attribution_scores, select_latents, LatentSet, SelectionMode};
use saeval::judge::{filter_latents_scr, JudgeVerdict, VerdictSource};
use saeval::numcore::Rng;
use saeval::probes::{train_probe, LinearProbe, ProbeConfig, ProbeRole, ProbeTag};
use saeval::sae::{SaeInfo, SaeKind, SaeModel};
use saeval::scr::ablated_probe_eval;
use saeval::store::{
    generate_synthetic, partition_scr, partition_tpp, Batch, ScrPair, ScrPartitionSizes, SyntheticSpec,
};

fn small_desk(seed: u64, samples: usize) -> SyntheticSpec {
    SyntheticSpec {
        num_samples: samples,
        ..SyntheticSpec::desk_suite(seed)
    }
}

fn random_batches(seed: u64, dim: usize) -> (Batch, Batch) {
    let mut rng = Rng::new(seed);
    let mut rows = |n: usize| (0..n * dim).map(|_| rng.normal()).collect::<Vec<f64>>();
    let pos = Batch::from_rows(dim, rows(12), vec![1; 12]).unwrap();
    let neg = Batch::from_rows(dim, rows(9), vec![0; 9]).unwrap();
    (pos, neg)
}

fn random_probe(seed: u64, dim: usize) -> LinearProbe {
    let mut rng = Rng::derive(seed, "probe");
    let w = (0..dim).map(|_| rng.normal()).collect();
    LinearProbe::new(w, rng.normal(), ProbeTag::new("a", "x", "y", ProbeRole::Custom)).unwrap()
}

/// The same model with latent `a` moved to position `perm[a]`.
fn permuted(sae: &SaeModel, perm: &[usize]) -> SaeModel {
    let (dim, k) = (sae.dim(), sae.dict_size());
    let mut w_enc = vec![0.0; k * dim];
    let mut w_dec = vec![0.0; k * dim];
    let mut b_enc = vec![0.0; k];
    for (a, &p) in perm.iter().enumerate() {
        w_enc[p * dim..(p + 1) * dim].copy_from_slice(&sae.w_enc()[a * dim..(a + 1) * dim]);
        w_dec[p * dim..(p + 1) * dim].copy_from_slice(&sae.w_dec()[a * dim..(a + 1) * dim]);
        b_enc[p] = sae.b_enc()[a];
    }
    SaeModel::from_parts(
        sae.kind().clone(),
        dim,
        k,
        w_enc,
        b_enc,
        w_dec,
        sae.b_dec().to_vec(),
        SaeInfo::default(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attribution_scales_with_probe_weights(seed in any::<u64>(), c in 0.01f64..50.0, topk in any::<bool>()) {
        let dim = 6;
        let kind = if topk { SaeKind::TopK { k: 3 } } else { SaeKind::Standard };
        let sae = SaeModel::random_init(kind, dim, 3, seed).unwrap();
        let (pos, neg) = random_batches(seed, dim);
        let probe = random_probe(seed, dim);
        let mut scaled = probe.clone();
        scaled.weights.iter_mut().for_each(|w| *w *= c);
        let base = attribution_scores(&sae, &probe, &pos, &neg).unwrap();
        let big = attribution_scores(&sae, &scaled, &pos, &neg).unwrap();
        for (a, b) in base.scores.iter().zip(&big.scores) {
            prop_assert!((c * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        for mode in [SelectionMode::Absolute, SelectionMode::Signed] {
            let k = sae.dict_size();
            prop_assert_eq!(select_latents(&base, mode, k).indices, select_latents(&big, mode, k).indices);
        }
    }

    #[test]
    fn attribution_is_permutation_equivariant(seed in any::<u64>()) {
        let dim = 5;
        let sae = SaeModel::random_init(SaeKind::Standard, dim, 4, seed).unwrap();
        let mut perm: Vec<usize> = (0..sae.dict_size()).collect();
        Rng::derive(seed, "perm").shuffle(&mut perm);
        let moved = permuted(&sae, &perm);
        let (pos, neg) = random_batches(seed, dim);
        let probe = random_probe(seed, dim);
        let base = attribution_scores(&sae, &probe, &pos, &neg).unwrap();
        let other = attribution_scores(&moved, &probe, &pos, &neg).unwrap();
        for (a, &p) in perm.iter().enumerate() {
            prop_assert!((base.scores[a] - other.scores[p]).abs() <= 1e-12);
        }
    }

    #[test]
    fn scr_partitions_are_disjoint(seed in 0u64..1000, eval in 1usize..40, biased in 1usize..400, balanced in 1usize..400) {
        let (store, _) = generate_synthetic(&small_desk(seed, 3000)).unwrap();
        let sizes = ScrPartitionSizes {
            eval_size: 4 * eval,
            biased_train_size: biased,
            balanced_train_size: balanced,
        };
        let pair = ScrPair::new("profession", ["professor", "nurse"], "gender", ["male", "female"]);
        let p = partition_scr(&store, &pair, &sizes).unwrap();
        let sets = [&p.biased_train, &p.balanced_train, &p.balanced_eval].map(|v| v.iter().copied().collect::<BTreeSet<_>>());
        prop_assert!(sets[0].is_disjoint(&sets[2]));
        prop_assert!(sets[0].is_disjoint(&sets[1]));
        prop_assert!(sets[1].is_disjoint(&sets[2]));
        prop_assert_eq!(sets[2].len(), p.balanced_eval.len());
    }

    #[test]
    fn scr_filter_output_is_an_ordered_subset(
        entries in prop::collection::vec((0usize..64, 0u8..5, 0u8..5, any::<bool>()), 0..20)
    ) {
        let mut seen = BTreeSet::new();
        let entries: Vec<_> = entries.into_iter().filter(|e| seen.insert(e.0)).collect();
        let latents = LatentSet {
            indices: entries.iter().map(|e| e.0).collect(),
            scores: entries.iter().map(|e| e.1 as f64).collect(),
            mode: SelectionMode::Absolute,
            n: entries.len(),
        };
        let verdicts: Vec<JudgeVerdict> = entries
            .iter()
            .map(|&(latent, p, q, err)| JudgeVerdict {
                latent,
                scores: if err { BTreeMap::new() } else { BTreeMap::from([("professor".into(), p), ("gender".into(), q)]) },
                raw_response: String::new(),
                source: VerdictSource::Mock,
                error: err.then(|| "bad".to_owned()),
            })
            .collect();
        let desired = vec!["professor".to_owned()];
        let spurious = vec!["gender".to_owned()];
        for extra in [None, Some(spurious.as_slice())] {
            let out = filter_latents_scr(&latents, &verdicts, &desired, extra).unwrap();
            let mut it = latents.indices.iter();
            for k in &out.kept.indices {
                prop_assert!(it.any(|a| a == k), "kept {:?} is not an ordered subset of {:?}", out.kept.indices, latents.indices);
            }
        }
    }
}

#[test]
fn oracle_top_signed_latents_are_the_concept_features() {
    let (store, truth) = generate_synthetic(&small_desk(3, 8000)).unwrap();
    let sae = SaeModel::oracle(&truth, 256, 0).unwrap();
    for attr in store.attributes() {
        for class in &attr.classes {
            let part = partition_tpp(&store, &attr.name, class, 2000).unwrap();
            let batch = part.batch(&store).unwrap();
            let tag = ProbeTag::new(&attr.name, class, "rest", ProbeRole::OneVsRest);
            let probe = train_probe(&batch, &ProbeConfig::default(), 0, tag).unwrap();
            let (pos, neg) = batch.split_by_label();
            let result = attribution_scores(&sae, &probe, &pos, &neg).unwrap();
            // With two classes the rest is the other class, whose features
            // score as high as the target's own, so both concepts are expected.
            let expected: Vec<usize> = if attr.classes.len() == 2 {
                truth.attribute_features(&attr.name)
            } else {
                truth.concept(&attr.name, class).unwrap().features.clone()
            };
            let mut top = select_latents(&result, SelectionMode::Signed, expected.len()).indices;
            top.sort_unstable();
            let mut want = expected;
            want.sort_unstable();
            assert_eq!(top, want, "{}:{class}", attr.name);
        }
    }
}

#[test]
fn ablated_accuracy_ignores_probe_scale() {
    let (store, truth) = generate_synthetic(&small_desk(1, 4000)).unwrap();
    let sae = SaeModel::oracle(&truth, 256, 0).unwrap();
    let ids: Vec<usize> = (0..1000).collect();
    let batch = store.binary_batch(&ids, "gender", "male").unwrap();
    let tag = ProbeTag::new("gender", "male", "female", ProbeRole::Custom);
    let probe = train_probe(&batch, &ProbeConfig::default(), 0, tag).unwrap();
    let (pos, neg) = batch.split_by_label();
    let result = attribution_scores(&sae, &probe, &pos, &neg).unwrap();
    for c in [0.1, 3.0, 250.0] {
        let mut scaled = probe.clone();
        scaled.weights.iter_mut().for_each(|w| *w *= c);
        scaled.bias *= c;
        let scaled_result = attribution_scores(&sae, &scaled, &pos, &neg).unwrap();
        for n in [0, 1, 2, 4] {
            let set = select_latents(&result, SelectionMode::Absolute, n);
            assert_eq!(
                set.indices,
                select_latents(&scaled_result, SelectionMode::Absolute, n).indices
            );
            let a = ablated_probe_eval(&sae, &probe, &set, &batch).unwrap();
            let b = ablated_probe_eval(&sae, &scaled, &set, &batch).unwrap();
            assert_eq!(a, b, "n={n} c={c}");
        }
    }
}
