// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unsupervised SAE quality: sparsity (L0) and fidelity (FVU).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SaeModel;
use crate::error::{Error, Result};
use crate::store::ActivationStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityMetrics {
    /// Mean number of nonzero latents per sample.
    pub mean_l0: f64,
    /// Fraction of variance unexplained by the reconstruction.
    pub fvu: f64,
}

/// Per-sample `(nonzero latents, squared reconstruction error)`.
fn per_sample(model: &SaeModel, store: &ActivationStore) -> Result<Vec<(usize, f64)>> {
    if store.is_empty() {
        return Err(Error::contract("store is empty"));
    }
    if store.dim() != model.dim() {
        return Err(Error::contract(format!(
            "store dim {} != SAE dim {}",
            store.dim(),
            model.dim()
        )));
    }
    let view = model.view();
    let dict = model.dict_size();
    Ok((0..store.len())
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![0.0; model.dim()],
                    vec![0.0; dict],
                    vec![0.0; dict],
                    vec![0.0; model.dim()],
                )
            },
            |(x, pre, f, xhat), i| {
                for (xi, v) in x.iter_mut().zip(store.activation(i)) {
                    *xi = f64::from(*v);
                }
                view.encode_into(x, pre, f);
                view.decode_into(f, xhat);
                let l0 = f.iter().filter(|v| **v != 0.0).count();
                let err = x.iter().zip(xhat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (l0, err)
            },
        )
        .collect())
}

/// Mean squared reconstruction error `mean ||x - x^||^2`.
pub fn reconstruction_mse(model: &SaeModel, store: &ActivationStore) -> Result<f64> {
    let rows = per_sample(model, store)?;
    Ok(rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64)
}

/// Mean L0 and FVU of `model` over every sample in `store`.
pub fn sparsity_metrics(model: &SaeModel, store: &ActivationStore) -> Result<SparsityMetrics> {
    let rows = per_sample(model, store)?;
    let n = rows.len() as f64;
    let d = store.dim();
    let mut mean = vec![0.0; d];
    for i in 0..store.len() {
        for (m, v) in mean.iter_mut().zip(store.activation(i)) {
            *m += f64::from(*v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut variance = 0.0;
    for i in 0..store.len() {
        variance += store
            .activation(i)
            .iter()
            .zip(&mean)
            .map(|(v, m)| (f64::from(*v) - m).powi(2))
            .sum::<f64>();
    }
    variance /= n;
    if variance <= 0.0 {
        return Err(Error::Undefined("FVU is undefined for a zero-variance store".into()));
    }
    let mse = rows.iter().map(|r| r.1).sum::<f64>() / n;
    Ok(SparsityMetrics {
        mean_l0: rows.iter().map(|r| r.0 as f64).sum::<f64>() / n,
        fvu: mse / variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sae::{SaeInfo, SaeKind};
    use crate::store::{ActivationStore, Attribute};

    fn store() -> ActivationStore {
        let acts: Vec<f32> = vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0, -1.0, 3.0];
        ActivationStore::from_parts(
            2,
            0,
            vec![Attribute::new("a", &["x", "y"])],
            acts,
            vec![0, 1, 0, 1],
            vec![],
            None,
        )
        .unwrap()
    }

    fn identity_like(b_dec: Vec<f64>, silent: bool) -> SaeModel {
        // Latents 0,1 carry +x, latents 2,3 carry -x, so ReLU codes are exact.
        let w = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        let w_enc = if silent { vec![0.0; 8] } else { w.clone() };
        SaeModel::from_parts(
            SaeKind::Standard,
            2,
            4,
            w_enc,
            vec![0.0; 4],
            w,
            b_dec,
            SaeInfo::default(),
        )
        .unwrap()
    }

    #[test]
    fn silent_model_has_zero_l0() {
        let m = sparsity_metrics(&identity_like(vec![0.0, 0.0], true), &store()).unwrap();
        assert_eq!(m.mean_l0, 0.0);
    }

    #[test]
    fn perfect_reconstruction_has_zero_fvu() {
        let m = sparsity_metrics(&identity_like(vec![0.0, 0.0], false), &store()).unwrap();
        assert!(m.fvu.abs() < 1e-15);
    }

    #[test]
    fn mean_predictor_has_unit_fvu() {
        let m = sparsity_metrics(&identity_like(vec![0.5, 1.5], true), &store()).unwrap();
        assert!((m.fvu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_store_is_undefined() {
        let s = ActivationStore::from_parts(
            2,
            0,
            vec![Attribute::new("a", &["x", "y"])],
            vec![1.0; 4],
            vec![0, 1],
            vec![],
            None,
        )
        .unwrap();
        assert!(matches!(
            sparsity_metrics(&identity_like(vec![0.0; 2], false), &s),
            Err(Error::Undefined(_))
        ));
    }
}
