// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

use super::linalg::dot;

/// Mean binary cross-entropy and its exact gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticGrad {
    pub loss: f64,
    pub grad_weights: Vec<f64>,
    pub grad_bias: f64,
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean BCE of `sigmoid(w·x + b)` against `labels`, with analytic gradients.
///
/// `inputs` is any sequence of rows of length `weights.len()`; labels must be
/// `0` or `1`.
pub fn logistic_forward_backward<'a, I>(weights: &[f64], bias: f64, inputs: I, labels: &[u8]) -> Result<LogisticGrad>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if labels.is_empty() {
        return Err(Error::contract("logistic_forward_backward: empty batch"));
    }
    let dim = weights.len();
    let mut grad_weights = vec![0.0; dim];
    let mut grad_bias = 0.0;
    let mut loss = 0.0;
    let mut count = 0usize;
    for (row, &y) in inputs.into_iter().zip(labels) {
        if row.len() != dim {
            return Err(Error::contract(format!(
                "logistic_forward_backward: row length {} != weight length {dim}",
                row.len()
            )));
        }
        if y > 1 {
            return Err(Error::contract(format!("label {y} is not 0 or 1")));
        }
        let z = dot(weights, row) + bias;
        // BCE(sigmoid(z), y) = softplus(z) - y z
        loss += softplus(z) - f64::from(y) * z;
        let r = super::sigmoid(z) - f64::from(y);
        for (g, x) in grad_weights.iter_mut().zip(row) {
            *g += r * x;
        }
        grad_bias += r;
        count += 1;
    }
    if count != labels.len() {
        return Err(Error::contract(format!(
            "logistic_forward_backward: {count} rows for {} labels",
            labels.len()
        )));
    }
    let n = count as f64;
    grad_weights.iter_mut().for_each(|g| *g /= n);
    Ok(LogisticGrad {
        loss: loss / n,
        grad_weights,
        grad_bias: grad_bias / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn batch(rng: &mut Rng, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let xs = (0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
        let ys = (0..n).map(|i| (i % 2) as u8).collect();
        (xs, ys)
    }

    fn loss_at(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[u8]) -> f64 {
        logistic_forward_backward(w, b, xs.iter().map(Vec::as_slice), ys)
            .unwrap()
            .loss
    }

    #[test]
    fn zero_model_gives_ln2() {
        let mut rng = Rng::new(0);
        let (xs, ys) = batch(&mut rng, 10, 4);
        let out = logistic_forward_backward(&[0.0; 4], 0.0, xs.iter().map(Vec::as_slice), &ys).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = Rng::new(11);
        let (xs, ys) = batch(&mut rng, 12, 8);
        let w: Vec<f64> = (0..8).map(|_| 0.5 * rng.normal()).collect();
        let b = 0.3;
        let g = logistic_forward_backward(&w, b, xs.iter().map(Vec::as_slice), &ys).unwrap();
        let h = 1e-5;
        for i in 0..8 {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = (loss_at(&wp, b, &xs, &ys) - loss_at(&wm, b, &xs, &ys)) / (2.0 * h);
            let rel = (fd - g.grad_weights[i]).abs() / fd.abs().max(g.grad_weights[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "coord {i}: fd {fd} analytic {}", g.grad_weights[i]);
        }
        let fd = (loss_at(&w, b + h, &xs, &ys) - loss_at(&w, b - h, &xs, &ys)) / (2.0 * h);
        assert!((fd - g.grad_bias).abs() / fd.abs().max(1e-8) < 1e-6);
    }

    #[test]
    fn separated_batch_with_large_margin_has_tiny_loss() {
        let xs = [vec![1.0], vec![-1.0], vec![2.0], vec![-2.0]];
        let ys = [1, 0, 1, 0];
        let out = logistic_forward_backward(&[50.0], 0.0, xs.iter().map(Vec::as_slice), &ys).unwrap();
        assert!(out.loss < 1e-3);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let xs: Vec<Vec<f64>> = vec![];
        let r = logistic_forward_backward(&[0.0], 0.0, xs.iter().map(Vec::as_slice), &[]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
