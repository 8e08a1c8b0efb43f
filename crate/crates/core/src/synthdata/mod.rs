//! Seeded class-conditional Gaussian generator for paired text/image inputs.
//!
//! Each class `c` owns a shared centroid `mu_c` and one modality-specific
//! centroid per channel. A text row is
//! `s_c * A_T mu_c + s_t * B_T nu_{T,c} + sigma * noise`, an image row is
//! built the same way with `s_v`. `A` and `B` are disjoint column blocks of a
//! random orthonormal frame, so shared and modality-specific signals live in
//! orthogonal subspaces and every centroid has unit norm.

mod augment;
mod io;

pub use augment::{augment, AugmentConfig};
pub use io::{decode_dataset, encode_dataset, load_dataset, meta_path, save_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub shared_strength: f64,
    pub text_strength: f64,
    pub image_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.text_dim < 4 || self.image_dim < 4 {
            return Err(Error::config(format!(
                "text_dim and image_dim must be at least 4, got {} and {}",
                self.text_dim, self.image_dim
            )));
        }
        for (name, v) in [
            ("shared_strength", self.shared_strength),
            ("text_strength", self.text_strength),
            ("image_strength", self.image_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return Err(Error::config(format!("noise_std must be positive, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Width of the centroid space: `min(C, D_T/2, D_V/2)`.
    pub fn latent_dim(&self) -> usize {
        self.num_classes.min(self.text_dim / 2).min(self.image_dim / 2)
    }
}

/// Paired raw inputs with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub text: Tensor,
    pub image: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Option<GenConfig>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.text.rows() != n || self.image.rows() != n {
            return Err(Error::config(format!(
                "row counts disagree: text {}, image {}, labels {n}",
                self.text.rows(),
                self.image.rows()
            )));
        }
        if let Some(i) = self.labels.iter().position(|&l| l >= self.num_classes) {
            return Err(Error::config(format!(
                "label {} at row {i} outside [0, {})",
                self.labels[i], self.num_classes
            )));
        }
        Ok(())
    }

    /// Rows `idx` of every field.
    pub fn subset(&self, idx: &[usize]) -> PairedDataset {
        PairedDataset {
            text: self.text.select_rows(idx),
            image: self.image.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// The generator's true class means, per modality (`C x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeans {
    pub text: Tensor,
    pub image: Tensor,
}

/// Gram-Schmidt on a Gaussian `dim x cols` matrix; returns the columns.
fn orthonormal_columns(dim: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn unit_vector(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `frame[:, offset..offset+k] * coeffs`
fn embed(frame: &[Vec<f64>], offset: usize, coeffs: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (c, col) in coeffs.iter().zip(&frame[offset..]) {
        out.iter_mut().zip(col).for_each(|(o, v)| *o += c * v);
    }
    out
}

/// Draws frames and centroids; leaves `rng` positioned for the sample noise.
fn draw_means(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> ClassMeans {
    let k = cfg.latent_dim();
    let text_frame = orthonormal_columns(cfg.text_dim, 2 * k, rng);
    let image_frame = orthonormal_columns(cfg.image_dim, 2 * k, rng);
    let mut text = Vec::with_capacity(cfg.num_classes * cfg.text_dim);
    let mut image = Vec::with_capacity(cfg.num_classes * cfg.image_dim);
    for _ in 0..cfg.num_classes {
        let shared = unit_vector(k, rng);
        let text_own = unit_vector(k, rng);
        let image_own = unit_vector(k, rng);

        let a = embed(&text_frame, 0, &shared, cfg.text_dim);
        let b = embed(&text_frame, k, &text_own, cfg.text_dim);
        text.extend(a.iter().zip(&b).map(|(x, y)| cfg.shared_strength * x + cfg.text_strength * y));

        let a = embed(&image_frame, 0, &shared, cfg.image_dim);
        let b = embed(&image_frame, k, &image_own, cfg.image_dim);
        image.extend(a.iter().zip(&b).map(|(x, y)| cfg.shared_strength * x + cfg.image_strength * y));
    }
    ClassMeans {
        text: Tensor::matrix(cfg.num_classes, cfg.text_dim, text).expect("text means"),
        image: Tensor::matrix(cfg.num_classes, cfg.image_dim, image).expect("image means"),
    }
}

/// True class means of the generator for `cfg`.
pub fn class_means(cfg: &GenConfig) -> Result<ClassMeans> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(draw_means(cfg, &mut rng))
}

/// Generates a dataset; labels are assigned round-robin so classes stay
/// balanced within one sample.
pub fn generate(cfg: &GenConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = draw_means(cfg, &mut rng);
    let n = cfg.num_samples;
    let mut text = Vec::with_capacity(n * cfg.text_dim);
    let mut image = Vec::with_capacity(n * cfg.image_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % cfg.num_classes;
        labels.push(c);
        for &m in means.text.row(c) {
            let e: f64 = rng.sample(StandardNormal);
            text.push(m + cfg.noise_std * e);
        }
        for &m in means.image.row(c) {
            let e: f64 = rng.sample(StandardNormal);
            image.push(m + cfg.noise_std * e);
        }
    }
    Ok(PairedDataset {
        text: Tensor::matrix(n, cfg.text_dim, text)?,
        image: Tensor::matrix(n, cfg.image_dim, image)?,
        labels,
        num_classes: cfg.num_classes,
        provenance: Some(cfg.clone()),
    })
}

/// Nearest-mean classifier with the true means; Bayes-optimal for the
/// shared isotropic covariance this generator uses.
pub fn nearest_mean_accuracy(x: &Tensor, labels: &[usize], means: &Tensor) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = x
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let pred = (0..means.rows())
                .map(|c| {
                    let d: f64 = row.iter().zip(means.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            pred == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cfg() -> GenConfig {
        GenConfig {
            num_samples: 2000,
            num_classes: 4,
            text_dim: 16,
            image_dim: 12,
            shared_strength: 0.0,
            text_strength: 1.0,
            image_strength: 0.0,
            noise_std: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&cfg()).unwrap();
        let b = generate(&cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = cfg();
        other.seed = 8;
        assert_ne!(a.text, generate(&other).unwrap().text);
    }

    #[test]
    fn labels_balanced() {
        let mut c = cfg();
        c.num_samples = 1003;
        let d = generate(&c).unwrap();
        let counts = d.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        d.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg();
        c.num_classes = 1;
        assert!(generate(&c).is_err());
        let mut c = cfg();
        c.image_dim = 3;
        assert!(generate(&c).is_err());
        let mut c = cfg();
        c.noise_std = 0.0;
        assert!(generate(&c).is_err());
        let mut c = cfg();
        c.text_strength = -1.0;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn imbalance_knob_moves_bayes_accuracy() {
        let c = cfg();
        let d = generate(&c).unwrap();
        let means = class_means(&c).unwrap();
        let chance = 1.0 / c.num_classes as f64;
        let text_acc = nearest_mean_accuracy(&d.text, &d.labels, &means.text);
        let image_acc = nearest_mean_accuracy(&d.image, &d.labels, &means.image);
        assert!(text_acc > chance + 0.2, "text accuracy {text_acc}");
        assert!((image_acc - chance).abs() <= 0.05, "image accuracy {image_acc}");
    }

    #[test]
    fn no_signal_means_chance() {
        let mut c = cfg();
        c.text_strength = 0.0;
        let d = generate(&c).unwrap();
        let means = class_means(&c).unwrap();
        assert!(means.text.data().iter().all(|&v| v == 0.0));
        // all means coincide, so the classifier always predicts class 0
        let acc = nearest_mean_accuracy(&d.text, &d.labels, &means.text);
        assert!((acc - 0.25).abs() <= 0.05);
    }

    #[test]
    fn text_accuracy_monotone_in_text_strength() {
        for seed in [1u64, 2, 3] {
            let mut prev = 0.0;
            for s in [0.0, 0.25, 0.5, 1.0, 2.0] {
                let mut c = cfg();
                c.seed = seed;
                c.text_strength = s;
                let d = generate(&c).unwrap();
                let acc = nearest_mean_accuracy(&d.text, &d.labels, &class_means(&c).unwrap().text);
                assert!(acc + 0.02 >= prev, "seed {seed} strength {s}: {acc} < {prev}");
                prev = acc;
            }
        }
    }
}
