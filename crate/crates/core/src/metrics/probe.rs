use serde::{Deserialize, Serialize};

use super::argmax;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Full-batch gradient descent settings for the multinomial logistic probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub step: f64,
    pub ridge: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 500,
            step: 0.1,
            ridge: 1e-4,
        }
    }
}

/// Trains a softmax classifier (weights + unpenalized bias, zero init) on
/// frozen features and returns held-out accuracy.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::config("probe features and labels differ in length"));
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::config("probe train/test feature widths differ"));
    }
    if test_y.is_empty() {
        return Err(Error::config("probe test set is empty"));
    }
    if train_y.iter().any(|&y| y >= num_classes) || test_y.iter().any(|&y| y >= num_classes) {
        return Err(Error::config("probe label outside class range"));
    }
    let first = train_y.first().copied();
    if first.is_none() || train_y.iter().all(|&y| Some(y) == first) {
        return Err(Error::config("probe training set must contain at least two classes"));
    }

    let (n, d, c) = (train_x.rows(), train_x.cols(), num_classes);
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut probs = vec![0.0; c];
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        for (x, &y) in train_x.row_iter().zip(train_y) {
            softmax_into(x, &w, &b, &mut probs);
            probs[y] -= 1.0;
            for (k, xv) in x.iter().enumerate() {
                let row = &mut gw[k * c..(k + 1) * c];
                row.iter_mut().zip(&probs).for_each(|(g, p)| *g += xv * p);
            }
            gb.iter_mut().zip(&probs).for_each(|(g, p)| *g += p);
        }
        let inv = 1.0 / n as f64;
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= cfg.step * (gv * inv + cfg.ridge * *wv);
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= cfg.step * gv * inv;
        }
    }

    let correct = test_x
        .row_iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let logits = logits(x, &w, &b);
            argmax(logits.into_iter()) == y
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

fn logits(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let c = b.len();
    let mut out = b.to_vec();
    for (k, xv) in x.iter().enumerate() {
        out.iter_mut().zip(&w[k * c..(k + 1) * c]).for_each(|(o, wv)| *o += xv * wv);
    }
    out
}

fn softmax_into(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let l = logits(x, w, b);
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(&l) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}
