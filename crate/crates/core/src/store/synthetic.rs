// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic activation data with a known dictionary.
//!
//! Every attribute class is a *concept* owning `features_per_concept`
//! ground-truth directions. A sample's activation is the sum of its
//! concepts' features with coefficients drawn from `[0.5, 1.5)` (times the
//! attribute's signal scale), plus background features that fire
//! independently of the labels, plus isotropic Gaussian noise.
//!
//! Each sample is also rendered as a short token sequence (one keyword per
//! attribute, one `topicN` token per active background feature, a few filler
//! words) whose per-token vectors sum to the noiseless activation. These give
//! the judge something to read.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ActivationStore, Attribute, Context, TokenProjection};
use crate::error::{Error, Result};
use crate::numcore::{dot, Rng};

const FILLERS: [&str; 6] = ["the", "a", "of", "and", "to", "in"];
const MAX_REJECTION_DRAWS: usize = 100_000;
/// Gender signal multiplier in the desk suite, so that a probe trained on
/// gender-aligned data leans on gender.
const DESK_GENDER_SCALE: f64 = 2.0;
/// Pairwise |cos| bound enforced when features cannot be made orthogonal.
pub(crate) const MAX_ABS_COSINE: f64 = 0.3;

/// Parameters of a synthetic store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub num_ground_truth_features: usize,
    pub features_per_concept: usize,
    pub noise_sigma: f64,
    pub attributes: Vec<Attribute>,
    /// Fraction of samples forced into aligned label cells (class index of
    /// the first attribute, modulo each other attribute's class count).
    /// The remainder is spread evenly over all cells.
    pub correlation: f64,
    pub num_samples: usize,
    pub seed: u64,
    /// Probability that each background feature fires in a sample.
    #[serde(default = "default_background_rate")]
    pub background_rate: f64,
    /// Number of leading samples whose token contexts are stored.
    #[serde(default = "default_context_samples")]
    pub context_samples: usize,
    /// Also emit a token projection so promoted tokens can be computed.
    #[serde(default)]
    pub token_projection: bool,
    /// Per-attribute multiplier on concept coefficients (default 1).
    #[serde(default)]
    pub signal_scale: BTreeMap<String, f64>,
}

fn default_background_rate() -> f64 {
    0.2
}

fn default_context_samples() -> usize {
    1000
}

impl SyntheticSpec {
    /// Two attributes (`profession`: 4 classes, `gender`: 2 classes, with
    /// gender the stronger signal) in 32 dimensions, 50k noiseless
    /// uncorrelated samples.
    pub fn desk_suite(seed: u64) -> Self {
        Self {
            dim: 32,
            num_ground_truth_features: 20,
            features_per_concept: 2,
            noise_sigma: 0.0,
            attributes: vec![
                Attribute::new("profession", &["professor", "nurse", "architect", "journalist"]),
                Attribute::new("gender", &["male", "female"]),
            ],
            correlation: 0.0,
            num_samples: 50_000,
            seed,
            background_rate: default_background_rate(),
            context_samples: default_context_samples(),
            token_projection: false,
            signal_scale: BTreeMap::from([("gender".to_owned(), DESK_GENDER_SCALE)]),
        }
    }

    fn scale_of(&self, attribute: &str) -> f64 {
        self.signal_scale.get(attribute).copied().unwrap_or(1.0)
    }

    /// Concepts in generation order: `(attribute index, class index)`.
    fn concepts(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, attr) in self.attributes.iter().enumerate() {
            out.extend((0..attr.classes.len()).map(|c| (a, c)));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_samples == 0 || self.features_per_concept == 0 {
            return Err(Error::config(
                "dim, num_samples and features_per_concept must be positive",
            ));
        }
        if self.attributes.is_empty() {
            return Err(Error::config("at least one attribute is required"));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.classes.len() < 2 {
                return Err(Error::config(format!("attribute {} needs at least 2 classes", a.name)));
            }
            if self.attributes[..i].iter().any(|o| o.name == a.name) {
                return Err(Error::config(format!("duplicate attribute {}", a.name)));
            }
        }
        let needed = self.features_per_concept * self.concepts().len();
        if needed > self.num_ground_truth_features {
            return Err(Error::config(format!(
                "{} concepts x {} features per concept = {needed} > {} ground-truth features",
                self.concepts().len(),
                self.features_per_concept,
                self.num_ground_truth_features
            )));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::config("correlation must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.background_rate) {
            return Err(Error::config("background_rate must lie in [0, 1]"));
        }
        if let Some((name, _)) = self.signal_scale.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("signal scale of {name} must be positive")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Feature indices owned by one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptFeatures {
    pub attribute: String,
    pub class: String,
    pub features: Vec<usize>,
}

/// The generator's dictionary: unit-norm feature directions and which
/// concept owns which feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub concepts: Vec<ConceptFeatures>,
    pub background: Vec<usize>,
    pub attributes: Vec<Attribute>,
}

impl GroundTruth {
    pub fn concept(&self, attribute: &str, class: &str) -> Option<&ConceptFeatures> {
        self.concepts
            .iter()
            .find(|c| c.attribute == attribute && c.class == class)
    }

    /// Every feature index owned by some class of `attribute`.
    pub fn attribute_features(&self, attribute: &str) -> Vec<usize> {
        self.concepts
            .iter()
            .filter(|c| c.attribute == attribute)
            .flat_map(|c| c.features.iter().copied())
            .collect()
    }

    /// Recover labels from an activation by projecting on each concept's
    /// features. Exact for noiseless data with orthogonal features.
    pub fn decode_labels(&self, activation: &[f32]) -> Vec<u32> {
        let x: Vec<f64> = activation.iter().map(|&v| f64::from(v)).collect();
        let strength = |c: &ConceptFeatures| -> f64 { c.features.iter().map(|&f| dot(&self.features[f], &x)).sum() };
        self.attributes
            .iter()
            .map(|attr| {
                let scores: Vec<(usize, f64)> = self
                    .concepts
                    .iter()
                    .filter(|c| c.attribute == attr.name)
                    .map(|c| (attr.class_index(&c.class).expect("known class"), strength(c)))
                    .collect();
                let best = scores.iter().fold(scores[0], |b, &s| if s.1 > b.1 { s } else { b });
                best.0 as u32
            })
            .collect()
    }

    pub(crate) fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        crate::container::write_file_atomic(path, &bytes)
    }
}

impl GroundTruth {
    /// Write as JSON.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.save_json(path.as_ref())
    }

    /// Read JSON written by [`GroundTruth::save`].
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = crate::container::read_file(path.as_ref())?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn feature_directions(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let (dim, count) = (spec.dim, spec.num_ground_truth_features);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    if count <= dim {
        // Gram-Schmidt on Gaussian draws: exactly orthonormal.
        while out.len() < count {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for u in &out {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            if normalize(&mut v) > 1e-6 {
                out.push(v);
            }
        }
        return Ok(out);
    }
    let mut draws = 0;
    while out.len() < count {
        draws += 1;
        if draws > MAX_REJECTION_DRAWS {
            return Err(Error::config(format!(
                "could not place {count} features with |cos| < {MAX_ABS_COSINE} in {dim} dimensions"
            )));
        }
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        normalize(&mut v);
        if out.iter().all(|u| dot(u, &v).abs() < MAX_ABS_COSINE) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Label tuples: `round(correlation * n)` aligned samples, the rest cycling
/// through every cell, then shuffled.
fn label_tuples(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Vec<u32>> {
    let sizes: Vec<usize> = spec.attributes.iter().map(|a| a.classes.len()).collect();
    let cells: usize = sizes.iter().product();
    let n = spec.num_samples;
    let n_aligned = (spec.correlation * n as f64).round() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n_aligned {
        let lead = i % sizes[0];
        out.push(sizes.iter().map(|&m| (lead % m) as u32).collect());
    }
    for j in 0..n - n_aligned {
        let mut rem = j % cells;
        let mut t = vec![0u32; sizes.len()];
        for (a, &m) in sizes.iter().enumerate().rev() {
            t[a] = (rem % m) as u32;
            rem /= m;
        }
        out.push(t);
    }
    rng.shuffle(&mut out);
    out
}

/// Generate a labeled store and its ground-truth dictionary.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ActivationStore, GroundTruth)> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = Rng::derive(spec.seed, "synthetic");
    let features = feature_directions(spec, &mut rng)?;

    let concept_list = spec.concepts();
    let fpc = spec.features_per_concept;
    let concepts: Vec<ConceptFeatures> = concept_list
        .iter()
        .enumerate()
        .map(|(k, &(a, c))| ConceptFeatures {
            attribute: spec.attributes[a].name.clone(),
            class: spec.attributes[a].classes[c].clone(),
            features: (k * fpc..(k + 1) * fpc).collect(),
        })
        .collect();
    let background: Vec<usize> = (concept_list.len() * fpc..spec.num_ground_truth_features).collect();
    // concept_of[a][c] -> index into `concepts`
    let concept_of: Vec<Vec<Option<usize>>> = spec
        .attributes
        .iter()
        .enumerate()
        .map(|(a, attr)| {
            (0..attr.classes.len())
                .map(|c| concept_list.iter().position(|&x| x == (a, c)))
                .collect()
        })
        .collect();

    let tuples = label_tuples(spec, &mut rng);
    let mut activations = Vec::with_capacity(spec.num_samples * dim);
    let mut labels = Vec::with_capacity(spec.num_samples * spec.attributes.len());
    let mut contexts = Vec::new();
    let mut acc = vec![0.0f64; dim];

    for (i, tuple) in tuples.iter().enumerate() {
        let mut tokens: Vec<(String, Vec<f64>)> = Vec::new();
        for (a, &c) in tuple.iter().enumerate() {
            let mut v = vec![0.0; dim];
            let scale = spec.scale_of(&spec.attributes[a].name);
            if let Some(k) = concept_of[a][c as usize] {
                for &f in &concepts[k].features {
                    let coef = scale * rng.uniform_range(0.5, 1.5);
                    v.iter_mut().zip(&features[f]).for_each(|(x, g)| *x += coef * g);
                }
            }
            tokens.push((spec.attributes[a].classes[c as usize].clone(), v));
        }
        for (b, &f) in background.iter().enumerate() {
            if rng.bernoulli(spec.background_rate) {
                let coef = rng.uniform_range(0.5, 1.5);
                tokens.push((format!("topic{b}"), features[f].iter().map(|g| coef * g).collect()));
            }
        }
        for _ in 0..2 {
            tokens.push((FILLERS[rng.below(FILLERS.len())].to_owned(), vec![0.0; dim]));
        }
        rng.shuffle(&mut tokens);

        acc.iter_mut().for_each(|x| *x = 0.0);
        for (_, v) in &tokens {
            acc.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        for s in acc.iter_mut() {
            let noise = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.normal()
            } else {
                0.0
            };
            activations.push((*s + noise) as f32);
        }
        labels.extend_from_slice(tuple);
        if i < spec.context_samples {
            contexts.push(Context {
                sample: i,
                tokens: tokens.iter().map(|(t, _)| t.clone()).collect(),
                token_activations: tokens.iter().flat_map(|(_, v)| v.iter().map(|&x| x as f32)).collect(),
            });
        }
    }

    let token_projection = spec
        .token_projection
        .then(|| build_projection(spec, &features, &concepts, &background));

    let truth = GroundTruth {
        dim,
        features,
        concepts,
        background,
        attributes: spec.attributes.clone(),
    };
    let store = ActivationStore::from_parts(
        dim,
        spec.seed,
        spec.attributes.clone(),
        activations,
        labels,
        contexts,
        token_projection,
    )?;
    Ok((store, truth))
}

/// Unembedding analog: each keyword token's column is the normalized sum of
/// its concept's features; fillers get zero columns.
fn build_projection(
    spec: &SyntheticSpec,
    features: &[Vec<f64>],
    concepts: &[ConceptFeatures],
    background: &[usize],
) -> TokenProjection {
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for attr in &spec.attributes {
        for class in &attr.classes {
            let mut v = vec![0.0; spec.dim];
            if let Some(c) = concepts.iter().find(|c| c.attribute == attr.name && &c.class == class) {
                for &f in &c.features {
                    v.iter_mut().zip(&features[f]).for_each(|(x, g)| *x += g);
                }
                normalize(&mut v);
            }
            columns.push((class.clone(), v));
        }
    }
    for (b, &f) in background.iter().enumerate() {
        columns.push((format!("topic{b}"), features[f].clone()));
    }
    for w in FILLERS {
        columns.push((w.to_owned(), vec![0.0; spec.dim]));
    }
    let vocab_len = columns.len();
    let mut matrix = vec![0.0f32; spec.dim * vocab_len];
    for (j, (_, col)) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            matrix[r * vocab_len + j] = v as f32;
        }
    }
    TokenProjection {
        vocab: columns.into_iter().map(|(t, _)| t).collect(),
        matrix,
    }
}
