//! Exact information quantities over finite joint distributions of
//! `(X_T, X_V, Y)`, and an exhaustive check of the alignment lower bound
//!
//! ```text
//! H(Y | Z_T, Z_V) - H(Y | X_T, X_V) >= |I(X_T;Y) - I(X_V;Y)|
//! ```
//!
//! for deterministic encoder pairs whose outputs are perfectly aligned (or
//! related by a bijection on their support). All quantities are in nats.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability table.
pub const MASS_TOLERANCE: f64 = 1e-12;
/// Largest number of encoder pairs [`enumerate_verify`] will visit.
pub const ENUMERATION_BUDGET: u128 = 10_000_000;
/// Slack below this counts as a violation of the bound.
pub const SLACK_TOLERANCE: f64 = -1e-9;

/// Probability table `p(t, v, y)`, flat in `(t, v, y)` row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDistribution {
    pub text_size: usize,
    pub image_size: usize,
    pub label_size: usize,
    pub probabilities: Vec<f64>,
}

impl JointDistribution {
    pub fn new(text_size: usize, image_size: usize, label_size: usize, probabilities: Vec<f64>) -> Result<Self> {
        let p = JointDistribution {
            text_size,
            image_size,
            label_size,
            probabilities,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.text_size * self.image_size * self.label_size;
        if n == 0 {
            return Err(Error::config("alphabet sizes must be at least 1"));
        }
        if self.probabilities.len() != n {
            return Err(Error::config(format!(
                "table has {} entries, alphabet sizes need {n}",
                self.probabilities.len()
            )));
        }
        if let Some(i) = self.probabilities.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::config(format!(
                "entry {i} is {}, probabilities must be finite and nonnegative",
                self.probabilities[i]
            )));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::config(format!("probabilities sum to {total}, not 1")));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, t: usize, v: usize, y: usize) -> f64 {
        self.probabilities[(t * self.image_size + v) * self.label_size + y]
    }

    /// Entries as `(t, v, y, p)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        let (nv, ny) = (self.image_size, self.label_size);
        self.probabilities
            .iter()
            .enumerate()
            .map(move |(i, &p)| (i / (nv * ny), (i / ny) % nv, i % ny, p))
    }

    /// Seeded draw from the uniform (flat Dirichlet) distribution over tables.
    pub fn random<R: Rng + ?Sized>(text_size: usize, image_size: usize, label_size: usize, rng: &mut R) -> Result<Self> {
        let n = text_size * image_size * label_size;
        let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = raw.iter().sum();
        JointDistribution::new(text_size, image_size, label_size, raw.into_iter().map(|v| v / total).collect())
    }
}

/// Entropies and mutual informations of one joint distribution, in nats.
/// `t` and `v` name the first and second variable (inputs or features).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoQuantities {
    pub h_y: f64,
    pub h_y_given_t: f64,
    pub h_y_given_v: f64,
    pub h_y_given_tv: f64,
    pub i_t_y: f64,
    pub i_v_y: f64,
    pub i_tv_y: f64,
    /// `I(V; Y | T)`
    pub i_v_y_given_t: f64,
    /// `I(T; Y | V)`
    pub i_t_y_given_v: f64,
}

fn xlogx_ratio(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p / q).ln()
    } else {
        0.0
    }
}

/// Marginal tables.
struct Marginals {
    y: Vec<f64>,
    t: Vec<f64>,
    v: Vec<f64>,
    tv: Vec<f64>,
    ty: Vec<f64>,
    vy: Vec<f64>,
}

fn marginals(p: &JointDistribution) -> Marginals {
    let (nt, nv, ny) = (p.text_size, p.image_size, p.label_size);
    let mut m = Marginals {
        y: vec![0.0; ny],
        t: vec![0.0; nt],
        v: vec![0.0; nv],
        tv: vec![0.0; nt * nv],
        ty: vec![0.0; nt * ny],
        vy: vec![0.0; nv * ny],
    };
    for (t, v, y, q) in p.entries() {
        m.y[y] += q;
        m.t[t] += q;
        m.v[v] += q;
        m.tv[t * nv + v] += q;
        m.ty[t * ny + y] += q;
        m.vy[v * ny + y] += q;
    }
    m
}

/// Computes every quantity. Conditional entropies use
/// `H(Y|A) = -sum p(a,y) log p(y|a)`; mutual informations use the
/// divergence form `sum p(a,y) log p(a,y) / (p(a) p(y))`, a separate route.
pub fn entropy_and_mi(p: &JointDistribution) -> Result<InfoQuantities> {
    p.validate()?;
    let (nv, ny) = (p.image_size, p.label_size);
    let m = marginals(p);

    let h_y: f64 = m.y.iter().map(|&q| -xlogx_ratio(q, 1.0)).sum();
    let cond = |joint: &[f64], given: &[f64]| -> f64 {
        joint
            .iter()
            .enumerate()
            .map(|(i, &q)| -xlogx_ratio(q, given[i / ny]))
            .sum()
    };
    let h_y_given_t = cond(&m.ty, &m.t);
    let h_y_given_v = cond(&m.vy, &m.v);
    let h_y_given_tv: f64 = p
        .entries()
        .map(|(t, v, _, q)| -xlogx_ratio(q, m.tv[t * nv + v]))
        .sum();

    let mi = |joint: &[f64], given: &[f64]| -> f64 {
        joint
            .iter()
            .enumerate()
            .map(|(i, &q)| xlogx_ratio(q, given[i / ny] * m.y[i % ny]))
            .sum()
    };
    let i_t_y = mi(&m.ty, &m.t);
    let i_v_y = mi(&m.vy, &m.v);
    let i_tv_y: f64 = p
        .entries()
        .map(|(t, v, y, q)| xlogx_ratio(q, m.tv[t * nv + v] * m.y[y]))
        .sum();

    // I(V;Y|T) = sum p(t,v,y) log [p(t,v,y) p(t)] / [p(t,v) p(t,y)]
    let i_v_y_given_t: f64 = p
        .entries()
        .map(|(t, v, y, q)| {
            let denom = m.tv[t * nv + v] * m.ty[t * ny + y] / m.t[t];
            xlogx_ratio(q, denom)
        })
        .sum();
    let i_t_y_given_v: f64 = p
        .entries()
        .map(|(t, v, y, q)| {
            let denom = m.tv[t * nv + v] * m.vy[v * ny + y] / m.v[v];
            xlogx_ratio(q, denom)
        })
        .sum();

    Ok(InfoQuantities {
        h_y,
        h_y_given_t,
        h_y_given_v,
        h_y_given_tv,
        i_t_y,
        i_v_y,
        i_tv_y,
        i_v_y_given_t,
        i_t_y_given_v,
    })
}

/// `|I(X_T;Y) - I(X_V;Y)|`.
pub fn information_gap(p: &JointDistribution) -> Result<f64> {
    let q = entropy_and_mi(p)?;
    Ok((q.i_t_y - q.i_v_y).abs())
}

/// Total map from an input alphabet into `0..latent_size`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicEncoder {
    pub map: Vec<usize>,
    pub latent_size: usize,
}

impl DeterministicEncoder {
    pub fn new(map: Vec<usize>, latent_size: usize) -> Result<Self> {
        if let Some(i) = map.iter().position(|&z| z >= latent_size) {
            return Err(Error::config(format!(
                "symbol {i} maps to {} outside latent alphabet of size {latent_size}",
                map[i]
            )));
        }
        Ok(DeterministicEncoder { map, latent_size })
    }

    pub fn identity(n: usize) -> Self {
        DeterministicEncoder {
            map: (0..n).collect(),
            latent_size: n,
        }
    }

    pub fn constant(n: usize, value: usize, latent_size: usize) -> Result<Self> {
        DeterministicEncoder::new(vec![value; n], latent_size)
    }

    /// The `index`-th encoder in base-`latent_size` digit order.
    fn nth(input_size: usize, latent_size: usize, mut index: u128) -> Self {
        let mut map = Vec::with_capacity(input_size);
        for _ in 0..input_size {
            map.push((index % latent_size as u128) as usize);
            index /= latent_size as u128;
        }
        DeterministicEncoder { map, latent_size }
    }
}

fn check_domains(p: &JointDistribution, gt: &DeterministicEncoder, gv: &DeterministicEncoder) -> Result<()> {
    if gt.map.len() != p.text_size || gv.map.len() != p.image_size {
        return Err(Error::config(format!(
            "encoder domains ({}, {}) do not match alphabets ({}, {})",
            gt.map.len(),
            gv.map.len(),
            p.text_size,
            p.image_size
        )));
    }
    Ok(())
}

/// Pushforward of `p` to `(Z_T, Z_V, Y)`.
pub fn induce(p: &JointDistribution, gt: &DeterministicEncoder, gv: &DeterministicEncoder) -> Result<JointDistribution> {
    check_domains(p, gt, gv)?;
    Ok(induce_unchecked(p, gt, gv))
}

fn induce_unchecked(p: &JointDistribution, gt: &DeterministicEncoder, gv: &DeterministicEncoder) -> JointDistribution {
    let (lt, lv, ny) = (gt.latent_size, gv.latent_size, p.label_size);
    let mut out = vec![0.0; lt * lv * ny];
    for (t, v, y, q) in p.entries() {
        out[(gt.map[t] * lv + gv.map[v]) * ny + y] += q;
    }
    JointDistribution {
        text_size: lt,
        image_size: lv,
        label_size: ny,
        probabilities: out,
    }
}

/// `P[Z_T = Z_V] = 1`: every `(z_t, z_v)` with positive mass has `z_t == z_v`.
pub fn is_aligned(induced: &JointDistribution) -> bool {
    let nv = induced.image_size;
    let m = marginals(induced);
    m.tv.iter().enumerate().all(|(i, &q)| q <= 0.0 || i / nv == i % nv)
}

/// The support of `(Z_T, Z_V)` is the graph of a bijection between the
/// realized values of `Z_T` and `Z_V`.
pub fn has_bijection(gt: &DeterministicEncoder, gv: &DeterministicEncoder, p: &JointDistribution) -> Result<bool> {
    check_domains(p, gt, gv)?;
    let induced = induce_unchecked(p, gt, gv);
    Ok(support_is_bijection(&induced))
}

fn support_is_bijection(induced: &JointDistribution) -> bool {
    let (lt, lv) = (induced.text_size, induced.image_size);
    let m = marginals(induced);
    let mut t_partner: Vec<Option<usize>> = vec![None; lt];
    let mut v_partner: Vec<Option<usize>> = vec![None; lv];
    for (i, &q) in m.tv.iter().enumerate() {
        if q <= 0.0 {
            continue;
        }
        let (t, v) = (i / lv, i % lv);
        match (t_partner[t], v_partner[v]) {
            (None, None) => {
                t_partner[t] = Some(v);
                v_partner[v] = Some(t);
            }
            (Some(a), Some(b)) if a == v && b == t => {}
            _ => return false,
        }
    }
    true
}

/// Every quantity along the proof of the bound, for one encoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub delta_p: f64,
    pub h_y_given_x: f64,
    pub h_y_given_z: f64,
    /// `(H(Y|Z) - H(Y|X)) - delta_p`
    pub slack: f64,
    pub aligned: bool,
    pub bijection: bool,
    /// `None` when neither hypothesis holds (report is informational).
    pub bound_holds: Option<bool>,
    pub i_xt_y: f64,
    pub i_xv_y: f64,
    pub i_x_y: f64,
    pub i_zt_y: f64,
    pub i_zv_y: f64,
    pub i_z_y: f64,
    pub i_zv_y_given_zt: f64,
    pub i_zt_y_given_zv: f64,
    /// `max` of the two chain-rule residuals for `I(Z_T, Z_V; Y)`.
    pub chain_rule_residual: f64,
    /// `max(I(Z_T;Y) - I(X_T;Y), I(Z_V;Y) - I(X_V;Y))`; nonpositive by data processing.
    pub dpi_excess: f64,
}

fn report_from(x: &InfoQuantities, z: &InfoQuantities, aligned: bool, bijection: bool) -> TheoremReport {
    let delta_p = (x.i_t_y - x.i_v_y).abs();
    let slack = (z.h_y_given_tv - x.h_y_given_tv) - delta_p;
    let chain_rule_residual = (z.i_tv_y - (z.i_t_y + z.i_v_y_given_t))
        .abs()
        .max((z.i_tv_y - (z.i_v_y + z.i_t_y_given_v)).abs());
    let hypothesis = aligned || bijection;
    TheoremReport {
        delta_p,
        h_y_given_x: x.h_y_given_tv,
        h_y_given_z: z.h_y_given_tv,
        slack,
        aligned,
        bijection,
        bound_holds: hypothesis.then_some(slack >= SLACK_TOLERANCE),
        i_xt_y: x.i_t_y,
        i_xv_y: x.i_v_y,
        i_x_y: x.i_tv_y,
        i_zt_y: z.i_t_y,
        i_zv_y: z.i_v_y,
        i_z_y: z.i_tv_y,
        i_zv_y_given_zt: z.i_v_y_given_t,
        i_zt_y_given_zv: z.i_t_y_given_v,
        chain_rule_residual,
        dpi_excess: (z.i_t_y - x.i_t_y).max(z.i_v_y - x.i_v_y),
    }
}

/// Evaluates the bound for one encoder pair.
pub fn verify_theorem(p: &JointDistribution, gt: &DeterministicEncoder, gv: &DeterministicEncoder) -> Result<TheoremReport> {
    let x = entropy_and_mi(p)?;
    let induced = induce(p, gt, gv)?;
    let z = entropy_and_mi_unchecked(&induced);
    Ok(report_from(&x, &z, is_aligned(&induced), support_is_bijection(&induced)))
}

fn entropy_and_mi_unchecked(p: &JointDistribution) -> InfoQuantities {
    // Pushforwards conserve mass up to rounding; skip the strict mass check.
    let mut q = p.clone();
    let total: f64 = q.probabilities.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        q.probabilities.iter_mut().for_each(|v| *v /= total);
    }
    entropy_and_mi(&q).expect("induced table is valid")
}

/// Aggregate over every deterministic encoder pair at one latent size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationSummary {
    pub pairs: u64,
    pub aligned: u64,
    pub bijective: u64,
    /// Pairs that are aligned or bijective (the ones the bound covers).
    pub checked: u64,
    pub violations: u64,
    pub min_slack: Option<f64>,
    pub delta_p: f64,
    pub max_chain_rule_residual: f64,
    pub max_dpi_excess: f64,
    /// Largest `I(Z_V;Y|Z_T)` or `I(Z_T;Y|Z_V)` among checked pairs.
    pub max_hypothesis_cmi: f64,
}

impl EnumerationSummary {
    fn empty(delta_p: f64) -> Self {
        EnumerationSummary {
            pairs: 0,
            aligned: 0,
            bijective: 0,
            checked: 0,
            violations: 0,
            min_slack: None,
            delta_p,
            max_chain_rule_residual: 0.0,
            max_dpi_excess: f64::NEG_INFINITY,
            max_hypothesis_cmi: 0.0,
        }
    }

    fn absorb(mut self, r: &TheoremReport) -> Self {
        self.pairs += 1;
        self.aligned += r.aligned as u64;
        self.bijective += r.bijection as u64;
        self.max_chain_rule_residual = self.max_chain_rule_residual.max(r.chain_rule_residual);
        self.max_dpi_excess = self.max_dpi_excess.max(r.dpi_excess);
        if r.aligned || r.bijection {
            self.checked += 1;
            self.violations += (r.slack < SLACK_TOLERANCE) as u64;
            self.min_slack = Some(self.min_slack.map_or(r.slack, |m| m.min(r.slack)));
            self.max_hypothesis_cmi = self
                .max_hypothesis_cmi
                .max(r.i_zv_y_given_zt.abs())
                .max(r.i_zt_y_given_zv.abs());
        }
        self
    }

    fn merge(mut self, o: Self) -> Self {
        self.pairs += o.pairs;
        self.aligned += o.aligned;
        self.bijective += o.bijective;
        self.checked += o.checked;
        self.violations += o.violations;
        self.min_slack = match (self.min_slack, o.min_slack) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.max_chain_rule_residual = self.max_chain_rule_residual.max(o.max_chain_rule_residual);
        self.max_dpi_excess = self.max_dpi_excess.max(o.max_dpi_excess);
        self.max_hypothesis_cmi = self.max_hypothesis_cmi.max(o.max_hypothesis_cmi);
        self
    }
}

/// Visits every pair of deterministic encoders into `0..latent_size`.
pub fn enumerate_verify(p: &JointDistribution, latent_size: usize) -> Result<EnumerationSummary> {
    if latent_size == 0 {
        return Err(Error::config("latent size must be at least 1"));
    }
    let total = (latent_size as u128)
        .checked_pow((p.text_size + p.image_size) as u32)
        .filter(|&n| n <= ENUMERATION_BUDGET)
        .ok_or_else(|| {
            Error::config(format!(
                "latent size {latent_size} over alphabets ({}, {}) exceeds the budget of {ENUMERATION_BUDGET} encoder pairs",
                p.text_size, p.image_size
            ))
        })?;
    let x = entropy_and_mi(p)?;
    let delta_p = (x.i_t_y - x.i_v_y).abs();
    let text_count = (latent_size as u128).pow(p.text_size as u32);
    let image_count = total / text_count;

    let summary = (0..text_count as u64)
        .into_par_iter()
        .map(|ti| {
            let gt = DeterministicEncoder::nth(p.text_size, latent_size, ti as u128);
            (0..image_count).fold(EnumerationSummary::empty(delta_p), |acc, vi| {
                let gv = DeterministicEncoder::nth(p.image_size, latent_size, vi);
                let induced = induce_unchecked(p, &gt, &gv);
                let z = entropy_and_mi_unchecked(&induced);
                let r = report_from(&x, &z, is_aligned(&induced), support_is_bijection(&induced));
                acc.absorb(&r)
            })
        })
        .reduce(|| EnumerationSummary::empty(delta_p), EnumerationSummary::merge);
    Ok(summary)
}
