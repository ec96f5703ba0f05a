// SPDX-License-Identifier: MIT OR Apache-2.0

use std::cmp::Ordering;

/// Dot product of two `f64` slices of equal length.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product of `f64` weights with an `f32` activation row, accumulated in `f64`.
#[inline]
pub fn dot_f32(weights: &[f64], row: &[f32]) -> f64 {
    debug_assert_eq!(weights.len(), row.len());
    weights.iter().zip(row).map(|(w, x)| w * f64::from(*x)).sum()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Indices sorted by `key` descending, ties broken by ascending index.
pub fn argsort_desc(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}
