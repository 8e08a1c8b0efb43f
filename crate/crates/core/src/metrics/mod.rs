//! Evaluation metrics over unit-row embeddings: modality gap, retrieval
//! recall, prototype zero-shot accuracy, linear probe and
//! alignment/uniformity statistics.

mod probe;

pub use probe::{linear_probe, ProbeConfig};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Flat evaluation summary; serialized with these snake_case keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub paired_gap: f64,
    pub centroid_gap: f64,
    pub r_at_1_i2t: f64,
    pub r_at_5_i2t: f64,
    pub r_at_10_i2t: f64,
    pub r_at_1_t2i: f64,
    pub r_at_5_t2i: f64,
    pub r_at_10_t2i: f64,
    pub zero_shot_accuracy: f64,
    pub linear_probe_accuracy: f64,
    pub alignment_stat: f64,
    pub uniformity_stat: f64,
}

fn paired_shapes(a: &Tensor, b: &Tensor) -> Result<usize> {
    if !a.is_matrix() || a.shape() != b.shape() {
        return Err(Error::config(format!(
            "paired feature matrices must share an N x d shape, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::config("feature matrices are empty"));
    }
    Ok(a.rows())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean distance between paired rows.
pub fn paired_gap(text: &Tensor, image: &Tensor) -> Result<f64> {
    let n = paired_shapes(text, image)?;
    Ok(text.row_iter().zip(image.row_iter()).map(|(t, v)| dist(t, v)).sum::<f64>() / n as f64)
}

fn column_mean(x: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for r in x.row_iter() {
        m.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    let n = x.rows() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Distance between the two modality means.
pub fn centroid_gap(text: &Tensor, image: &Tensor) -> Result<f64> {
    paired_shapes(text, image)?;
    Ok(dist(&column_mean(text), &column_mean(image)))
}

/// Fraction of queries whose paired gallery row is among the `k` most
/// similar; equal scores rank the lower gallery index first.
pub fn recall_at_k(query: &Tensor, gallery: &Tensor, k: usize) -> Result<f64> {
    let n = paired_shapes(query, gallery)?;
    if k == 0 || k > n {
        return Err(Error::config(format!("recall@{k} needs 1 <= K <= N = {n}")));
    }
    let hits = (0..n)
        .filter(|&i| {
            let q = query.row(i);
            let own = dot(q, gallery.row(i));
            let mut ahead = 0;
            for (j, g) in gallery.row_iter().enumerate() {
                if j == i {
                    continue;
                }
                let s = dot(q, g);
                if s > own || (s == own && j < i) {
                    ahead += 1;
                    if ahead >= k {
                        return false;
                    }
                }
            }
            true
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Per-class normalized mean of `embeddings`.
pub fn class_prototypes(embeddings: &Tensor, labels: &[usize], num_classes: usize) -> Result<Tensor> {
    if embeddings.rows() != labels.len() {
        return Err(Error::config("prototype embeddings and labels differ in length"));
    }
    let d = embeddings.cols();
    let mut sums = vec![0.0; num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in embeddings.row_iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::config(format!("label {y} outside [0, {num_classes})")));
        }
        counts[y] += 1;
        sums[y * d..(y + 1) * d].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::config(format!("class {c} has no prototype samples")));
    }
    Tensor::matrix(num_classes, d, sums)?.normalize_rows()
}

/// Predicts `argmax_c cos(query, prototype_c)` (lowest class on ties) and
/// returns the fraction correct.
pub fn nearest_prototype_accuracy(queries: &Tensor, labels: &[usize], prototypes: &Tensor) -> Result<f64> {
    if queries.rows() != labels.len() || queries.rows() == 0 {
        return Err(Error::config("queries and labels must be nonempty and equally long"));
    }
    if queries.cols() != prototypes.cols() {
        return Err(Error::config("query and prototype widths differ"));
    }
    let protos = prototypes.normalize_rows()?;
    let correct = queries
        .row_iter()
        .zip(labels)
        .filter(|(q, &y)| argmax((0..protos.rows()).map(|c| dot(q, protos.row(c)))) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Zero-shot analog: class prototypes come from encoded held-out text
/// samples, eval images are assigned to the nearest prototype.
pub fn zero_shot_accuracy(
    image_embeddings: &Tensor,
    image_labels: &[usize],
    prototype_text_embeddings: &Tensor,
    prototype_labels: &[usize],
    num_classes: usize,
) -> Result<f64> {
    let protos = class_prototypes(prototype_text_embeddings, prototype_labels, num_classes)?;
    nearest_prototype_accuracy(image_embeddings, image_labels, &protos)
}

/// `(alignment, uniformity)`: mean squared paired distance, and the log of
/// the mean Gaussian potential (scale 2) over all same-modality pairs of
/// both modalities pooled together.
pub fn alignment_uniformity(text: &Tensor, image: &Tensor) -> Result<(f64, f64)> {
    let n = paired_shapes(text, image)?;
    let alignment = text
        .row_iter()
        .zip(image.row_iter())
        .map(|(t, v)| {
            let d = dist(t, v);
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let potential = |x: &Tensor| -> f64 {
        let mut s = 0.0;
        for a in x.row_iter() {
            for b in x.row_iter() {
                let d = dist(a, b);
                s += (-2.0 * d * d).exp();
            }
        }
        s
    };
    let pooled = (potential(text) + potential(image)) / (2 * n * n) as f64;
    Ok((alignment, pooled.ln()))
}
