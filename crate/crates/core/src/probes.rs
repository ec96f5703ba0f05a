// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary linear probes on raw activations.
//!
//! A probe is logistic regression `sigmoid(P·x + b)` trained with minibatch
//! Adam. A sample is classified positive iff `sigmoid(P·x + b) > 0.5`; an
//! exact 0.5 counts as negative.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, push_f64s};
use crate::error::{Error, Result};
use crate::numcore::{dot, logistic_forward_backward, sigmoid, AdamConfig, AdamState, Rng};
use crate::store::Batch;

pub const PROBE_MAGIC: &[u8; 8] = b"SAEPROBE";
pub const PROBE_VERSION: u32 = 1;

/// Which training split a probe came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeRole {
    Biased,
    DesiredOracle,
    Spurious,
    OneVsRest,
    Custom,
}

/// What a probe was trained to detect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTag {
    pub attribute: String,
    pub positive: String,
    /// Negative class, or `rest` for one-vs-rest probes.
    pub negative: String,
    pub role: ProbeRole,
}

impl ProbeTag {
    pub fn new(attribute: &str, positive: &str, negative: &str, role: ProbeRole) -> Self {
        Self {
            attribute: attribute.into(),
            positive: positive.into(),
            negative: negative.into(),
            role,
        }
    }

    /// Stable identifier such as `profession:professor-vs-nurse:biased`.
    pub fn id(&self) -> String {
        let role = serde_json::to_value(self.role)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned));
        format!(
            "{}:{}-vs-{}:{}",
            self.attribute,
            self.positive,
            self.negative,
            role.unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub trained_on: ProbeTag,
}

impl LinearProbe {
    pub fn new(weights: Vec<f64>, bias: f64, trained_on: ProbeTag) -> Result<Self> {
        if weights.is_empty() || weights.iter().chain([&bias]).any(|w| !w.is_finite()) {
            return Err(Error::contract("probe weights must be non-empty and finite"));
        }
        Ok(Self {
            weights,
            bias,
            trained_on,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `P·x + b`.
    pub fn logit(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        sigmoid(self.logit(x)) > 0.5
    }
}

/// Probe training hyperparameters. Defaults: 5 epochs, batch 16, lr 1e-3,
/// Adam (0.9, 0.999), at most 4000 training points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Training uses at most this many samples (the first ones given).
    pub max_datapoints: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            max_datapoints: 4000,
        }
    }
}

/// Train a probe; label 1 marks the positive class.
pub fn train_probe(samples: &Batch, config: &ProbeConfig, seed: u64, tag: ProbeTag) -> Result<LinearProbe> {
    train_probe_with_history(samples, config, seed, tag).map(|(p, _)| p)
}

/// Like [`train_probe`], also returning the mean minibatch loss of each epoch.
pub fn train_probe_with_history(
    samples: &Batch,
    config: &ProbeConfig,
    seed: u64,
    tag: ProbeTag,
) -> Result<(LinearProbe, Vec<f64>)> {
    if config.epochs == 0 || config.batch_size == 0 || config.max_datapoints == 0 {
        return Err(Error::config(
            "probe epochs, batch_size and max_datapoints must be positive",
        ));
    }
    let n = samples.len().min(config.max_datapoints);
    let labels = &samples.labels()[..n];
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::data(format!(
            "probe for {} needs both classes, got {positives} positive of {n}",
            tag.id()
        )));
    }
    let dim = samples.dim();
    // Parameters: weights followed by the bias.
    let mut params = vec![0.0; dim + 1];
    let mut adam = AdamState::new(
        dim + 1,
        AdamConfig {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            ..AdamConfig::default()
        },
    );
    let mut rng = Rng::derive(seed, "probe-order");
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = vec![0.0; dim + 1];
    let mut batch_labels = Vec::with_capacity(config.batch_size);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let (weights, bias) = params.split_at(dim);
            let out =
                logistic_forward_backward(weights, bias[0], chunk.iter().map(|&i| samples.row(i)), &batch_labels)?;
            grads[..dim].copy_from_slice(&out.grad_weights);
            grads[dim] = out.grad_bias;
            adam.step(&mut params, &grads)?;
            epoch_loss += out.loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    let bias = params.pop().unwrap_or_default();
    Ok((LinearProbe::new(params, bias, tag)?, history))
}

/// Fraction of samples whose prediction matches the label.
pub fn probe_accuracy(probe: &LinearProbe, samples: &Batch) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("probe_accuracy: empty batch"));
    }
    if samples.dim() != probe.dim() {
        return Err(Error::contract(format!(
            "batch dim {} != probe dim {}",
            samples.dim(),
            probe.dim()
        )));
    }
    let correct = samples
        .rows()
        .zip(samples.labels())
        .filter(|(x, &y)| probe.predict(x) == (y == 1))
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Write a probe file: JSON header `{dim, trained_on}`, then `f64` weights and bias.
pub fn save_probe(probe: &LinearProbe, path: impl AsRef<Path>) -> Result<()> {
    container::write_file_atomic(path.as_ref(), &encode_probe(probe)?)
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<LinearProbe> {
    decode_probe(&container::read_file(path.as_ref())?)
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    trained_on: ProbeTag,
}

fn encode_probe(probe: &LinearProbe) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        dim: probe.dim(),
        trained_on: probe.trained_on.clone(),
    })?;
    let mut payload = Vec::new();
    push_f64s(&mut payload, &probe.weights);
    push_f64s(&mut payload, &[probe.bias]);
    Ok(container::encode(PROBE_MAGIC, PROBE_VERSION, &header, &payload))
}

fn decode_probe(bytes: &[u8]) -> Result<LinearProbe> {
    let c = container::decode(bytes, PROBE_MAGIC, PROBE_VERSION)?;
    let header: Header = serde_json::from_slice(c.header)
        .map_err(|e| Error::format(container::PREFIX_LEN as u64, format!("bad probe header: {e}")))?;
    let mut payload = c.payload;
    payload.expect_len(8 * (header.dim + 1))?;
    let weights = payload.f64s(header.dim)?;
    let bias = payload.f64s(1)?[0];
    payload.finish()?;
    LinearProbe::new(weights, bias, header.trained_on)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;
    use proptest::prelude::*;

    fn tag() -> ProbeTag {
        ProbeTag::new("a", "x", "y", ProbeRole::Custom)
    }

    /// Two Gaussian blobs separated along a random direction with margin.
    fn separable(n: usize, dim: usize, seed: u64) -> Batch {
        let mut rng = Rng::new(seed);
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = dot(&dir, &dir).sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let mut x: Vec<f64> = (0..dim).map(|_| 0.3 * rng.normal()).collect();
            let along = dot(&x, &dir);
            let target = if y == 1 { 1.0 + along.abs() } else { -1.0 - along.abs() };
            for (xi, di) in x.iter_mut().zip(&dir) {
                *xi += (target - along) * di;
            }
            rows.extend(x);
            labels.push(y);
        }
        Batch::from_rows(dim, rows, labels).unwrap()
    }

    #[test]
    fn separable_data_is_learned() {
        let all = separable(5000, 8, 1);
        let train = all.select(&(0..4000).collect::<Vec<_>>());
        let test = all.select(&(4000..5000).collect::<Vec<_>>());
        let (probe, history) = train_probe_with_history(&train, &ProbeConfig::default(), 0, tag()).unwrap();
        assert!(probe_accuracy(&probe, &test).unwrap() >= 0.99);
        for w in history.windows(2) {
            assert!(w[1] < w[0], "loss history {history:?}");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let b = Batch::from_rows(1, vec![1.0, 2.0], vec![1, 1]).unwrap();
        assert!(matches!(
            train_probe(&b, &ProbeConfig::default(), 0, tag()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let b = separable(300, 4, 2);
        let a = train_probe(&b, &ProbeConfig::default(), 9, tag()).unwrap();
        let c = train_probe(&b, &ProbeConfig::default(), 9, tag()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_probe_on_balanced_batch_is_half() {
        let b = separable(10, 3, 0);
        let p = LinearProbe::new(vec![0.0; 3], 0.0, tag()).unwrap();
        assert_eq!(probe_accuracy(&p, &b).unwrap(), 0.5);
    }

    #[test]
    fn label_oracle_probe_is_perfect() {
        let b = Batch::from_rows(1, vec![1.0, -1.0, 2.0, -3.0], vec![1, 0, 1, 0]).unwrap();
        let p = LinearProbe::new(vec![5.0], 0.0, tag()).unwrap();
        assert_eq!(probe_accuracy(&p, &b).unwrap(), 1.0);
        assert!(probe_accuracy(&p, &b.select(&[])).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = LinearProbe::new(
            vec![0.25, -1.5, 3.0],
            0.125,
            ProbeTag::new("g", "m", "f", ProbeRole::Biased),
        )
        .unwrap();
        save_probe(&p, dir.path().join("p.bin")).unwrap();
        assert_eq!(load_probe(dir.path().join("p.bin")).unwrap(), p);
        assert_eq!(p.trained_on.id(), "g:m-vs-f:biased");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn accuracy_matches_naive_loop_and_is_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let rows: Vec<f64> = (0..40 * 5).map(|_| rng.normal()).collect();
            let labels: Vec<u8> = (0..40).map(|_| rng.below(2) as u8).collect();
            let b = Batch::from_rows(5, rows, labels).unwrap();
            let w: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let bias = rng.normal();
            let p = LinearProbe::new(w.clone(), bias, tag()).unwrap();
            let mut correct = 0;
            for i in 0..b.len() {
                let mut z = bias;
                for (j, wj) in w.iter().enumerate() {
                    z += wj * b.row(i)[j];
                }
                let pred = 1.0 / (1.0 + (-z).exp()) > 0.5;
                if pred == (b.labels()[i] == 1) {
                    correct += 1;
                }
            }
            let acc = probe_accuracy(&p, &b).unwrap();
            prop_assert_eq!(acc, correct as f64 / 40.0);
            let scaled = LinearProbe::new(w.iter().map(|v| v * scale).collect(), bias * scale, tag()).unwrap();
            prop_assert_eq!(probe_accuracy(&scaled, &b).unwrap(), acc);
        }
    }
}
