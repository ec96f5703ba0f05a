// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders: Standard (ReLU + L1), TopK and JumpReLU.
//!
//! All kinds share the same affine maps:
//!
//! ```text
//! pre = W_enc (x - b_dec) + b_enc
//! f   = act(pre)
//! x^  = W_dec f + b_dec
//! ```
//!
//! and differ only in `act`:
//!
//! * Standard: `max(pre, 0)`.
//! * TopK: keep the `k` largest pre-activations unchanged, zero the rest.
//!   Exactly `min(k, dict_size)` latents are nonzero for every input.
//! * JumpReLU: keep `pre_a` iff `pre_a > theta_a`.
//!
//! Decoder directions `d_a` (columns of `W_dec`) are stored one per row.

mod checkpoint;
mod metrics;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, Rng};
use crate::store::{Batch, GroundTruth};

pub use checkpoint::{load_sae, save_sae, SAE_MAGIC, SAE_VERSION};
pub use metrics::{reconstruction_mse, sparsity_metrics, SparsityMetrics};
pub use train::{train_sae, Checkpoint, TrainConfig};

/// Activation function family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SaeKind {
    Standard,
    #[serde(rename = "topk")]
    TopK {
        k: usize,
    },
    #[serde(rename = "jumprelu")]
    JumpRelu {
        #[serde(skip)]
        theta: Vec<f64>,
    },
}

impl SaeKind {
    /// Short tag used in identifiers: `standard`, `topk`, `jumprelu`.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::TopK { .. } => "topk",
            Self::JumpRelu { .. } => "jumprelu",
        }
    }
}

/// Provenance carried with every model and checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SaeInfo {
    pub name: String,
    pub expansion_factor: usize,
    pub seed: u64,
    /// Fraction of the training budget completed (0 = initialization).
    pub fraction: f64,
    pub l1_coefficient: Option<f64>,
    pub samples_seen: u64,
}

/// A trained or constructed sparse autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    kind: SaeKind,
    dim: usize,
    dict_size: usize,
    /// `dict_size x dim`, row-major.
    w_enc: Vec<f64>,
    b_enc: Vec<f64>,
    /// Decoder directions, `dict_size x dim`, row `a` is `d_a`.
    w_dec: Vec<f64>,
    b_dec: Vec<f64>,
    pub info: SaeInfo,
}

impl SaeModel {
    /// Assemble a model from raw parameters, checking every shape.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: SaeKind,
        dim: usize,
        dict_size: usize,
        w_enc: Vec<f64>,
        b_enc: Vec<f64>,
        w_dec: Vec<f64>,
        b_dec: Vec<f64>,
        info: SaeInfo,
    ) -> Result<Self> {
        if dim == 0 || dict_size < dim {
            return Err(Error::contract(format!(
                "dict_size {dict_size} must be at least dim {dim} (> 0)"
            )));
        }
        let shapes = [
            ("W_enc", w_enc.len(), dict_size * dim),
            ("b_enc", b_enc.len(), dict_size),
            ("W_dec", w_dec.len(), dict_size * dim),
            ("b_dec", b_dec.len(), dim),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::contract(format!("{name} has {got} values, expected {want}")));
            }
        }
        match &kind {
            SaeKind::TopK { k } if *k == 0 => return Err(Error::contract("TopK needs k >= 1")),
            SaeKind::JumpRelu { theta } if theta.len() != dict_size => {
                return Err(Error::contract(format!(
                    "JumpReLU theta has {} values, expected {dict_size}",
                    theta.len()
                )))
            }
            SaeKind::JumpRelu { theta } if theta.iter().any(|t| t.is_nan() || *t < 0.0) => {
                return Err(Error::contract("JumpReLU thresholds must be non-negative"))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            dim,
            dict_size,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            info,
        })
    }

    /// Random initialization: unit-norm Gaussian decoder directions, zero
    /// biases, and the encoder set to the decoder transpose scaled by
    /// `2 / expansion_factor`. About half the latents fire at
    /// initialization, so that scale keeps the initial reconstruction at
    /// roughly the input's magnitude.
    pub fn random_init(kind: SaeKind, dim: usize, expansion_factor: usize, seed: u64) -> Result<Self> {
        let dict_size = dim * expansion_factor;
        let mut rng = Rng::derive(seed, "sae-init");
        let mut w_dec = vec![0.0; dict_size * dim];
        for row in w_dec.chunks_exact_mut(dim.max(1)) {
            loop {
                row.iter_mut().for_each(|v| *v = rng.normal());
                let n = dot(row, row).sqrt();
                if n > 1e-8 {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        let kind = match kind {
            SaeKind::JumpRelu { theta } if theta.is_empty() => SaeKind::JumpRelu {
                theta: vec![0.0; dict_size],
            },
            other => other,
        };
        let scale = 2.0 / expansion_factor as f64;
        let w_enc = w_dec.iter().map(|v| scale * v).collect();
        Self::from_parts(
            kind,
            dim,
            dict_size,
            w_enc,
            vec![0.0; dict_size],
            w_dec,
            vec![0.0; dim],
            SaeInfo {
                name: String::new(),
                expansion_factor,
                seed,
                fraction: 0.0,
                l1_coefficient: None,
                samples_seen: 0,
            },
        )
    }

    /// Dictionary built from a synthetic store's ground truth: the first
    /// latents decode to the true features and encode by projection onto
    /// them; the remaining latents are dead (zero encoder rows) with random
    /// unit decoder directions.
    pub fn oracle(truth: &GroundTruth, dict_size: usize, seed: u64) -> Result<Self> {
        let dim = truth.dim;
        let f = truth.features.len();
        if dict_size < f.max(dim) {
            return Err(Error::config(format!(
                "oracle dictionary of {dict_size} latents cannot hold {f} features in {dim} dimensions"
            )));
        }
        let mut model = Self::random_init(SaeKind::Standard, dim, 1, seed)?;
        let mut w_dec = Vec::with_capacity(dict_size * dim);
        let mut w_enc = vec![0.0; dict_size * dim];
        for (a, g) in truth.features.iter().enumerate() {
            w_dec.extend_from_slice(g);
            w_enc[a * dim..(a + 1) * dim].copy_from_slice(g);
        }
        let mut rng = Rng::derive(seed, "oracle-dead-latents");
        while w_dec.len() < dict_size * dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let n = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            w_dec.extend_from_slice(&v);
        }
        model = Self::from_parts(
            SaeKind::Standard,
            dim,
            dict_size,
            w_enc,
            vec![0.0; dict_size],
            w_dec,
            vec![0.0; dim],
            SaeInfo {
                name: "oracle".into(),
                expansion_factor: dict_size / dim,
                seed,
                fraction: 1.0,
                ..model.info
            },
        )?;
        Ok(model)
    }

    /// Identifier such as `topk-k8-x8-s0-f0.31` (kind, k or L1 weight,
    /// expansion, seed, checkpoint fraction), prefixed by the name if set.
    pub fn id(&self) -> String {
        let shape = match (&self.kind, self.info.l1_coefficient) {
            (SaeKind::TopK { k }, _) => format!("topk-k{k}"),
            (SaeKind::Standard, Some(l1)) => format!("standard-l{l1}"),
            (kind, _) => kind.tag().to_owned(),
        };
        let body = format!(
            "{shape}-x{}-s{}-f{:.2}",
            self.dict_size / self.dim,
            self.info.seed,
            self.info.fraction
        );
        if self.info.name.is_empty() {
            body
        } else {
            format!("{}:{body}", self.info.name)
        }
    }

    pub fn kind(&self) -> &SaeKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dict_size(&self) -> usize {
        self.dict_size
    }

    pub fn w_enc(&self) -> &[f64] {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &[f64] {
        &self.b_enc
    }

    pub fn w_dec(&self) -> &[f64] {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &[f64] {
        &self.b_dec
    }

    /// Decoder direction `d_a`.
    pub fn decoder_direction(&self, latent: usize) -> &[f64] {
        &self.w_dec[latent * self.dim..(latent + 1) * self.dim]
    }

    pub(crate) fn view(&self) -> SaeView<'_> {
        SaeView {
            kind: &self.kind,
            dim: self.dim,
            w_enc: &self.w_enc,
            b_enc: &self.b_enc,
            w_dec: &self.w_dec,
            b_dec: &self.b_dec,
        }
    }

    /// Latent activations for one input.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::contract(format!(
                "encode: input length {} != dim {}",
                x.len(),
                self.dim
            )));
        }
        let mut pre = vec![0.0; self.dict_size];
        let mut out = vec![0.0; self.dict_size];
        self.view().encode_into(x, &mut pre, &mut out);
        Ok(out)
    }

    /// Reconstruction from latent activations.
    pub fn decode(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dict_size {
            return Err(Error::contract(format!(
                "decode: latent length {} != dict_size {}",
                f.len(),
                self.dict_size
            )));
        }
        let mut out = vec![0.0; self.dim];
        self.view().decode_into(f, &mut out);
        Ok(out)
    }

    /// Latent activations for every row of a batch (`len x dict_size`, row-major).
    pub fn encode_batch(&self, batch: &Batch) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        if batch.dim() != self.dim {
            return Err(Error::contract(format!(
                "batch dim {} != SAE dim {}",
                batch.dim(),
                self.dim
            )));
        }
        let view = self.view();
        let mut out = vec![0.0; batch.len() * self.dict_size];
        out.par_chunks_mut(self.dict_size)
            .zip(batch.rows().collect::<Vec<_>>())
            .for_each_init(
                || vec![0.0; self.dict_size],
                |pre, (dst, row)| view.encode_into(row, pre, dst),
            );
        Ok(out)
    }
}

/// Borrowed parameter slices; shared by inference and the trainer.
#[derive(Clone, Copy)]
pub(crate) struct SaeView<'a> {
    pub kind: &'a SaeKind,
    pub dim: usize,
    pub w_enc: &'a [f64],
    pub b_enc: &'a [f64],
    pub w_dec: &'a [f64],
    pub b_dec: &'a [f64],
}

impl SaeView<'_> {
    pub fn pre_activations(&self, x: &[f64], pre: &mut [f64]) {
        let d = self.dim;
        for (a, p) in pre.iter_mut().enumerate() {
            let w = &self.w_enc[a * d..(a + 1) * d];
            let mut s = self.b_enc[a];
            for ((wi, xi), bi) in w.iter().zip(x).zip(self.b_dec) {
                s += wi * (xi - bi);
            }
            *p = s;
        }
    }

    /// Writes `f = act(pre)` into `out` (pre is left intact).
    pub fn activate(&self, pre: &[f64], out: &mut [f64]) {
        match self.kind {
            SaeKind::Standard => {
                for (o, &p) in out.iter_mut().zip(pre) {
                    *o = p.max(0.0);
                }
            }
            SaeKind::TopK { k } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for a in top_k_indices(pre, *k) {
                    out[a] = pre[a];
                }
            }
            SaeKind::JumpRelu { theta } => {
                for ((o, &p), &t) in out.iter_mut().zip(pre).zip(theta) {
                    *o = if p > t { p } else { 0.0 };
                }
            }
        }
    }

    pub fn encode_into(&self, x: &[f64], pre: &mut [f64], out: &mut [f64]) {
        self.pre_activations(x, pre);
        self.activate(pre, out);
    }

    pub fn decode_into(&self, f: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out.copy_from_slice(self.b_dec);
        for (a, &fa) in f.iter().enumerate() {
            if fa != 0.0 {
                let dir = &self.w_dec[a * d..(a + 1) * d];
                for (o, v) in out.iter_mut().zip(dir) {
                    *o += fa * v;
                }
            }
        }
    }
}

/// Indices of the `k` largest values (ties to the lower index), unordered.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    let cmp = |&a: &usize, &b: &usize| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx
}
