//! Finite-difference gradient checks of every loss term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::BundleVars;

pub const LOSS_NAMES: [&str; 10] = [
    "l_con", "l_align", "l_ortho", "l_con_i", "l_uni_i", "l_sep", "l_br", "l_gc", "l_gc_a", "total",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSpec {
    pub losses: Vec<String>,
    pub configurations: usize,
    pub batch_size: usize,
    pub dim: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            losses: LOSS_NAMES.iter().map(|s| s.to_string()).collect(),
            configurations: 20,
            batch_size: 8,
            dim: 16,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub loss: String,
    pub configuration: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub tolerance: f64,
    pub step: f64,
    pub checks: usize,
    pub failures: usize,
    pub worst_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Eight paired raw feature fields: a shared base plus per-field noise, so
/// paired rows are correlated the way trained features are.
pub fn random_fields(n: usize, d: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let base = draw(n * d);
    (0..8)
        .map(|_| {
            let noise = draw(n * d);
            let data = base.iter().zip(&noise).map(|(b, e)| b + 0.6 * e).collect();
            Tensor::matrix(n, d, data).expect("shape")
        })
        .collect()
}

/// Builds the named loss on row-normalized copies of the eight fields.
pub fn loss_on_fields(name: &str, g: &mut Graph, raw: &[Var], w: &LossWeights) -> Result<Var> {
    if raw.len() != 8 {
        return Err(Error::config(format!("expected 8 feature fields, got {}", raw.len())));
    }
    let mut f = Vec::with_capacity(8);
    for &v in raw {
        f.push(g.row_normalize(v)?);
    }
    let b = BundleVars::from_fields(f.try_into().expect("eight fields"));
    let t = w.bridge_time;
    match name {
        "l_con" => losses::l_con(g, &b, w.temperature),
        "l_align" => losses::l_align(g, b.image, b.text, w.align_epsilon),
        "l_ortho" => losses::l_ortho(g, b.image, b.image_ind, b.text, b.text_ind),
        "l_con_i" => losses::l_con_indep(g, &b, w.temperature),
        "l_uni_i" => losses::l_uniformity(g, b.image_ind, b.text_ind, w.kernel_scale),
        "l_sep" => losses::l_sep(g, &b, w.temperature, w.kernel_scale),
        "l_br" => losses::l_bridge(g, b.image_aug, b.image, b.text, t),
        "l_gc" => losses::l_gc(g, b.image, b.text),
        "l_gc_a" => losses::l_gc_aug(g, &b),
        "total" => {
            let fixed = LossWeights {
                bridge_time_mode: losses::BridgeTimeMode::Fixed,
                ..w.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Ok(losses::total_loss(g, &b, &fixed, &mut rng)?.total)
        }
        other => Err(Error::config(format!(
            "unknown loss {other:?}; expected one of {}",
            LOSS_NAMES.join(", ")
        ))),
    }
}

/// Runs every selected loss at every configuration. Failing checks are
/// reported, not raised; the caller decides the exit status.
pub fn run_gradcheck(spec: &GradCheckSpec) -> Result<GradCheckSummary> {
    if spec.losses.is_empty() {
        return Err(Error::config("loss selection is empty"));
    }
    if let Some(bad) = spec.losses.iter().find(|l| !LOSS_NAMES.contains(&l.as_str())) {
        return Err(Error::config(format!("unknown loss {bad:?}; expected one of {}", LOSS_NAMES.join(", "))));
    }
    if spec.configurations == 0 || spec.batch_size < 2 || spec.dim == 0 {
        return Err(Error::config("need at least one configuration, batch_size >= 2 and dim >= 1"));
    }
    if !(spec.step > 0.0 && spec.tolerance > 0.0) {
        return Err(Error::config("step and tolerance must be positive"));
    }
    spec.weights.validate()?;

    let mut entries = Vec::new();
    for c in 0..spec.configurations {
        let fields = random_fields(spec.batch_size, spec.dim, spec.seed.wrapping_add(c as u64));
        for name in &spec.losses {
            let report = grad_check(
                |g, vars| loss_on_fields(name, g, vars, &spec.weights),
                &fields,
                spec.step,
                spec.tolerance,
            )?;
            entries.push(GradCheckEntry {
                loss: name.clone(),
                configuration: c,
                max_rel_error: report.worst(),
                pass: report.pass,
            });
        }
    }
    Ok(GradCheckSummary {
        tolerance: spec.tolerance,
        step: spec.step,
        checks: entries.len(),
        failures: entries.iter().filter(|e| !e.pass).count(),
        worst_rel_error: entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max),
        entries,
    })
}
