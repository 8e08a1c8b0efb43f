//! Batch verification of the alignment bound over random and explicit joints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infogap::{enumerate_verify, EnumerationSummary, JointDistribution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSpec {
    pub text_size: usize,
    pub image_size: usize,
    pub label_size: usize,
    pub latent_size: usize,
    /// Random tables drawn uniformly from the probability simplex.
    #[serde(default)]
    pub num_distributions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Extra tables checked after the random ones; sizes may differ.
    #[serde(default)]
    pub distributions: Vec<JointDistribution>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionResult {
    pub index: usize,
    pub explicit: bool,
    pub summary: EnumerationSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremBatch {
    pub latent_size: usize,
    pub pairs: u64,
    pub checked: u64,
    pub violations: u64,
    pub min_slack: Option<f64>,
    pub max_chain_rule_residual: f64,
    pub max_dpi_excess: f64,
    pub max_hypothesis_cmi: f64,
    pub results: Vec<DistributionResult>,
}

impl TheoremBatch {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub fn run_theorem(spec: &TheoremSpec) -> Result<TheoremBatch> {
    if spec.num_distributions == 0 && spec.distributions.is_empty() {
        return Err(Error::config("no distributions requested"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tables = Vec::with_capacity(spec.num_distributions + spec.distributions.len());
    for _ in 0..spec.num_distributions {
        tables.push((false, JointDistribution::random(spec.text_size, spec.image_size, spec.label_size, &mut rng)?));
    }
    for d in &spec.distributions {
        d.validate()?;
        tables.push((true, d.clone()));
    }

    let mut results = Vec::with_capacity(tables.len());
    for (index, (explicit, p)) in tables.into_iter().enumerate() {
        results.push(DistributionResult {
            index,
            explicit,
            summary: enumerate_verify(&p, spec.latent_size)?,
        });
    }
    let fold = |f: fn(&EnumerationSummary) -> f64| results.iter().map(|r| f(&r.summary)).fold(f64::NEG_INFINITY, f64::max);
    Ok(TheoremBatch {
        latent_size: spec.latent_size,
        pairs: results.iter().map(|r| r.summary.pairs).sum(),
        checked: results.iter().map(|r| r.summary.checked).sum(),
        violations: results.iter().map(|r| r.summary.violations).sum(),
        min_slack: results.iter().filter_map(|r| r.summary.min_slack).reduce(f64::min),
        max_chain_rule_residual: fold(|s| s.max_chain_rule_residual),
        max_dpi_excess: fold(|s| s.max_dpi_excess),
        max_hypothesis_cmi: fold(|s| s.max_hypothesis_cmi),
        results,
    })
}
