//! Two-component principal projection for scatter plots.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const POWER_ITERATIONS: usize = 100;
const PROJECTION_SEED: u64 = 0x005e_ed2d;

/// Projects the rows of `x` onto its top two principal directions, found by
/// power iteration on the covariance with deflation. Output is `N x 2`.
pub fn project_2d(x: &Tensor) -> Result<Tensor> {
    if !x.is_matrix() || x.rows() < 2 {
        return Err(Error::config("projection needs a matrix with at least 2 rows"));
    }
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered: Vec<Vec<f64>> = x
        .row_iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(2);
    for _ in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthogonalize(&mut v, &directions);
        normalize(&mut v);
        for _ in 0..POWER_ITERATIONS {
            let mut w: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum())
                .collect();
            orthogonalize(&mut w, &directions);
            if normalize(&mut w) <= 1e-300 {
                // No variance left: keep the seeded start direction.
                break;
            }
            v = w;
        }
        let lambda: f64 = (0..d)
            .map(|i| v[i] * (0..d).map(|j| cov[i * d + j] * v[j]).sum::<f64>())
            .sum();
        // Subtract the found component from the covariance.
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        directions.push(v);
    }

    let mut out = Vec::with_capacity(n * 2);
    for r in &centered {
        for k in 0..2 {
            out.push(directions.get(k).map_or(0.0, |dir| dot(r, dir)));
        }
    }
    Tensor::matrix(n, 2, out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 1e-300 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
