// SPDX-License-Identifier: MIT OR Apache-2.0

//! The SAE training loop: Adam with linear warmup over shuffled minibatches.

use serde::{Deserialize, Serialize};

use super::{SaeInfo, SaeKind, SaeModel, SaeView};
use crate::error::{Error, Result};
use crate::numcore::{AdamConfig, AdamState, Rng};
use crate::store::ActivationStore;

/// Optimization hyperparameters. Defaults follow the reference training
/// table (batch 4096, lr 3e-4, 1000 warmup steps, Adam (0.9, 0.999)); the
/// sample budget default is desk-sized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total number of samples drawn over the run.
    pub num_samples: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// L1 penalty weight; only used by the Standard kind.
    pub l1_coefficient: f64,
    pub expansion_factor: usize,
    pub checkpoint_fractions: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_samples: 1_000_000,
            batch_size: 4096,
            learning_rate: 3e-4,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            l1_coefficient: 1e-3,
            expansion_factor: 8,
            checkpoint_fractions: vec![0.0, 0.01, 0.10, 0.31, 1.0],
        }
    }
}

impl TrainConfig {
    /// Settings for the 32-dimensional synthetic suite: smaller batches and
    /// warmup so that a run of 500k samples takes seconds.
    pub fn desk() -> Self {
        Self {
            num_samples: 500_000,
            batch_size: 256,
            learning_rate: 1e-3,
            warmup_steps: 100,
            l1_coefficient: 0.03,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let f = &self.checkpoint_fractions;
        if self.batch_size == 0 || self.expansion_factor == 0 || self.num_samples == 0 {
            return Err(Error::config(
                "batch_size, expansion_factor and num_samples must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.l1_coefficient >= 0.0) {
            return Err(Error::config(
                "learning_rate must be positive and l1_coefficient non-negative",
            ));
        }
        if f.is_empty()
            || f.windows(2).any(|w| !(w[0] < w[1]))
            || f.iter().any(|x| !(0.0..=1.0).contains(x))
            || *f.last().unwrap() != 1.0
        {
            return Err(Error::config(format!(
                "checkpoint_fractions {f:?} must be strictly increasing within [0, 1] and end at 1.0"
            )));
        }
        Ok(())
    }

    /// Number of optimizer steps in the run.
    pub fn total_steps(&self) -> u64 {
        self.num_samples.div_ceil(self.batch_size as u64)
    }
}

/// A snapshot taken at `fraction` of the training budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fraction: f64,
    pub model: SaeModel,
}

/// Flat parameter layout `[W_enc | b_enc | W_dec | b_dec]`.
struct Layout {
    dim: usize,
    dict: usize,
}

impl Layout {
    fn len(&self) -> usize {
        2 * self.dict * self.dim + self.dict + self.dim
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w_enc, rest) = p.split_at(self.dict * self.dim);
        let (b_enc, rest) = rest.split_at(self.dict);
        let (w_dec, b_dec) = rest.split_at(self.dict * self.dim);
        (w_enc, b_enc, w_dec, b_dec)
    }

    fn split_mut<'a>(&self, p: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64], &'a mut [f64]) {
        let (w_enc, rest) = p.split_at_mut(self.dict * self.dim);
        let (b_enc, rest) = rest.split_at_mut(self.dict);
        let (w_dec, b_dec) = rest.split_at_mut(self.dict * self.dim);
        (w_enc, b_enc, w_dec, b_dec)
    }
}

/// Train an SAE of the given kind on `store`, returning one checkpoint per
/// configured fraction (fraction 0 is the initialization).
///
/// JumpReLU models are inference-only and rejected here.
pub fn train_sae(store: &ActivationStore, kind: &SaeKind, config: &TrainConfig, seed: u64) -> Result<Vec<Checkpoint>> {
    config.validate()?;
    if store.is_empty() {
        return Err(Error::contract("train_sae: store is empty"));
    }
    if matches!(kind, SaeKind::JumpRelu { .. }) {
        return Err(Error::config("JumpReLU SAEs are supported for inference only"));
    }
    let init = SaeModel::random_init(kind.clone(), store.dim(), config.expansion_factor, seed)?;
    let layout = Layout {
        dim: init.dim,
        dict: init.dict_size,
    };
    let mut params = Vec::with_capacity(layout.len());
    for part in [&init.w_enc, &init.b_enc, &init.w_dec, &init.b_dec] {
        params.extend_from_slice(part);
    }
    let l1 = match kind {
        SaeKind::Standard => config.l1_coefficient,
        _ => 0.0,
    };
    let base_info = SaeInfo {
        name: String::new(),
        expansion_factor: config.expansion_factor,
        seed,
        fraction: 0.0,
        l1_coefficient: matches!(kind, SaeKind::Standard).then_some(config.l1_coefficient),
        samples_seen: 0,
    };

    let total_steps = config.total_steps();
    let targets: Vec<u64> = config
        .checkpoint_fractions
        .iter()
        .map(|f| (f * total_steps as f64).round() as u64)
        .collect();
    let snapshot = |params: &[f64], fraction: f64, samples_seen: u64| -> Result<Checkpoint> {
        let (w_enc, b_enc, w_dec, b_dec) = layout.split(params);
        let model = SaeModel::from_parts(
            kind.clone(),
            layout.dim,
            layout.dict,
            w_enc.to_vec(),
            b_enc.to_vec(),
            w_dec.to_vec(),
            b_dec.to_vec(),
            SaeInfo {
                fraction,
                samples_seen,
                ..base_info.clone()
            },
        )?;
        Ok(Checkpoint { fraction, model })
    };

    let mut checkpoints = Vec::with_capacity(targets.len());
    let mut next = 0;
    while next < targets.len() && targets[next] == 0 {
        checkpoints.push(snapshot(&params, config.checkpoint_fractions[next], 0)?);
        next += 1;
    }

    let mut adam = AdamState::new(
        layout.len(),
        AdamConfig {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            ..AdamConfig::default()
        },
    );
    let mut rng = Rng::derive(seed, "sae-batches");
    let mut order: Vec<usize> = (0..store.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut grads = vec![0.0; layout.len()];
    let mut work = Workspace::new(layout.dim, layout.dict);
    let mut batch_ids = Vec::with_capacity(config.batch_size);
    let mut samples_seen = 0u64;

    for step in 1..=total_steps {
        let remaining = config.num_samples - samples_seen;
        let size = (config.batch_size as u64).min(remaining) as usize;
        batch_ids.clear();
        for _ in 0..size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch_ids.push(order[cursor]);
            cursor += 1;
        }
        grads.iter_mut().for_each(|g| *g = 0.0);
        let loss = batch_gradient(&layout, kind, &params, store, &batch_ids, l1, &mut grads, &mut work);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss {loss}"),
            });
        }
        let warm = if config.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / config.warmup_steps as f64).min(1.0)
        };
        adam.step_with_lr(&mut params, &grads, config.learning_rate * warm)?;
        renormalize_decoder(&layout, &mut params);
        samples_seen += size as u64;

        while next < targets.len() && targets[next] <= step {
            checkpoints.push(snapshot(&params, config.checkpoint_fractions[next], samples_seen)?);
            next += 1;
        }
    }
    Ok(checkpoints)
}

struct Workspace {
    x: Vec<f64>,
    pre: Vec<f64>,
    f: Vec<f64>,
    g_out: Vec<f64>,
    active: Vec<usize>,
}

impl Workspace {
    fn new(dim: usize, dict: usize) -> Self {
        Self {
            x: vec![0.0; dim],
            pre: vec![0.0; dict],
            f: vec![0.0; dict],
            g_out: vec![0.0; dim],
            active: Vec::with_capacity(dict),
        }
    }
}

/// Accumulates the gradient of the mean per-sample loss
/// `||x^ - x||^2 + l1 * sum_a |f_a|` into `grads`; returns the mean loss.
#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    layout: &Layout,
    kind: &SaeKind,
    params: &[f64],
    store: &ActivationStore,
    ids: &[usize],
    l1: f64,
    grads: &mut [f64],
    ws: &mut Workspace,
) -> f64 {
    let d = layout.dim;
    let (w_enc, b_enc, w_dec, b_dec) = layout.split(params);
    let view = SaeView {
        kind,
        dim: d,
        w_enc,
        b_enc,
        w_dec,
        b_dec,
    };
    let (g_w_enc, g_b_enc, g_w_dec, g_b_dec) = layout.split_mut(grads);
    let scale = 1.0 / ids.len() as f64;
    let mut total = 0.0;
    for &id in ids {
        for (x, v) in ws.x.iter_mut().zip(store.activation(id)) {
            *x = f64::from(*v);
        }
        view.encode_into(&ws.x, &mut ws.pre, &mut ws.f);
        ws.active.clear();
        ws.active.extend((0..layout.dict).filter(|&a| ws.f[a] != 0.0));

        // e = x^ - x
        ws.g_out.copy_from_slice(b_dec);
        for &a in &ws.active {
            let fa = ws.f[a];
            for (o, v) in ws.g_out.iter_mut().zip(&w_dec[a * d..(a + 1) * d]) {
                *o += fa * v;
            }
        }
        let mut sq = 0.0;
        for (o, x) in ws.g_out.iter_mut().zip(&ws.x) {
            *o -= x;
            sq += *o * *o;
            *o *= 2.0 * scale;
        }
        let l1_term: f64 = ws.active.iter().map(|&a| ws.f[a].abs()).sum();
        total += sq + l1 * l1_term;

        for (g, o) in g_b_dec.iter_mut().zip(&ws.g_out) {
            *g += o;
        }
        for &a in &ws.active {
            let fa = ws.f[a];
            let dir = &w_dec[a * d..(a + 1) * d];
            let mut g_f = l1 * scale * fa.signum();
            for ((gw, o), v) in g_w_dec[a * d..(a + 1) * d].iter_mut().zip(&ws.g_out).zip(dir) {
                *gw += fa * o;
                g_f += v * o;
            }
            // Active latents pass the gradient straight through for every
            // trainable kind (ReLU region, or a kept TopK slot).
            g_b_enc[a] += g_f;
            let w = &w_enc[a * d..(a + 1) * d];
            for (((gw, x), b), (gb, wi)) in g_w_enc[a * d..(a + 1) * d]
                .iter_mut()
                .zip(&ws.x)
                .zip(b_dec)
                .zip(g_b_dec.iter_mut().zip(w))
            {
                *gw += g_f * (x - b);
                *gb -= g_f * wi;
            }
        }
    }
    total * scale
}

fn renormalize_decoder(layout: &Layout, params: &mut [f64]) {
    let d = layout.dim;
    let (_, _, w_dec, _) = layout.split_mut(params);
    for row in w_dec.chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::dot;
    use crate::sae::reconstruction_mse;
    use crate::store::{generate_synthetic, SyntheticSpec};

    fn small_store(seed: u64) -> ActivationStore {
        let mut spec = SyntheticSpec::desk_suite(seed);
        spec.num_samples = 3000;
        spec.context_samples = 0;
        generate_synthetic(&spec).unwrap().0
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            num_samples: 60_000,
            batch_size: 128,
            learning_rate: 3e-3,
            warmup_steps: 20,
            l1_coefficient: 0.05,
            ..TrainConfig::default()
        }
    }

    /// Finite-difference check of the hand-written backward pass.
    #[test]
    fn gradient_matches_finite_differences() {
        let store = small_store(4);
        for kind in [SaeKind::Standard, SaeKind::TopK { k: 3 }] {
            let init = SaeModel::random_init(kind.clone(), 32, 2, 7).unwrap();
            let layout = Layout { dim: 32, dict: 64 };
            let mut params: Vec<f64> = [&init.w_enc, &init.b_enc, &init.w_dec, &init.b_dec]
                .into_iter()
                .flatten()
                .copied()
                .collect();
            let mut rng = Rng::new(3);
            params.iter_mut().for_each(|p| *p += 0.05 * rng.normal());
            let ids: Vec<usize> = (0..16).collect();
            let mut ws = Workspace::new(32, 64);
            let mut grads = vec![0.0; layout.len()];
            batch_gradient(&layout, &kind, &params, &store, &ids, 0.1, &mut grads, &mut ws);
            let h = 1e-6;
            for _ in 0..40 {
                let i = rng.below(layout.len());
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let mut scratch = vec![0.0; layout.len()];
                let lp = batch_gradient(&layout, &kind, &plus, &store, &ids, 0.1, &mut scratch, &mut ws);
                let lm = batch_gradient(&layout, &kind, &minus, &store, &ids, 0.1, &mut scratch, &mut ws);
                let numeric = (lp - lm) / (2.0 * h);
                let err = (numeric - grads[i]).abs();
                assert!(
                    err <= 1e-4 * (1.0 + numeric.abs()),
                    "{kind:?} param {i}: {numeric} vs {}",
                    grads[i]
                );
            }
        }
    }

    #[test]
    fn training_reduces_reconstruction_loss() {
        let store = small_store(1);
        for kind in [SaeKind::Standard, SaeKind::TopK { k: 4 }] {
            let cks = train_sae(&store, &kind, &quick_config(), 0).unwrap();
            assert_eq!(cks.len(), 5);
            let first = reconstruction_mse(&cks[0].model, &store).unwrap();
            let last = reconstruction_mse(&cks[4].model, &store).unwrap();
            assert!(last < first, "{kind:?}: {last} !< {first}");
        }
    }

    #[test]
    fn checkpoints_follow_fractions_and_keep_unit_norm() {
        let store = small_store(2);
        let cks = train_sae(&store, &SaeKind::Standard, &quick_config(), 5).unwrap();
        let fracs: Vec<f64> = cks.iter().map(|c| c.fraction).collect();
        assert_eq!(fracs, vec![0.0, 0.01, 0.10, 0.31, 1.0]);
        assert_eq!(cks[0].model.info.samples_seen, 0);
        assert_eq!(cks[4].model.info.samples_seen, 60_000);
        for c in &cks {
            for a in 0..c.model.dict_size() {
                let d = c.model.decoder_direction(a);
                assert!((dot(d, d).sqrt() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let store = small_store(3);
        let mut cfg = quick_config();
        cfg.num_samples = 5_000;
        let a = train_sae(&store, &SaeKind::TopK { k: 4 }, &cfg, 11).unwrap();
        let b = train_sae(&store, &SaeKind::TopK { k: 4 }, &cfg, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let store = small_store(3);
        let mut cfg = quick_config();
        cfg.checkpoint_fractions = vec![0.5, 0.2, 1.0];
        assert!(matches!(
            train_sae(&store, &SaeKind::Standard, &cfg, 0),
            Err(Error::Config(_))
        ));
        cfg.checkpoint_fractions = vec![0.0, 0.5];
        assert!(train_sae(&store, &SaeKind::Standard, &cfg, 0).is_err());
        let jump = SaeKind::JumpRelu { theta: vec![] };
        assert!(train_sae(&store, &jump, &quick_config(), 0).is_err());
    }

    #[test]
    fn divergence_reports_the_step() {
        let store = small_store(3);
        let mut cfg = quick_config();
        cfg.learning_rate = f64::MAX;
        cfg.warmup_steps = 0;
        match train_sae(&store, &SaeKind::Standard, &cfg, 0) {
            Err(Error::Training { step, .. }) => assert!(step >= 1),
            other => panic!("expected training error, got {other:?}"),
        }
    }
}
