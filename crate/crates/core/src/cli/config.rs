use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::ProbeConfig;
use crate::synthdata::{load_dataset, generate, AugmentConfig, GenConfig, PairedDataset};

/// Reads a JSON config; unknown or missing keys are configuration errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
}

/// Moment-based adaptive optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Fractions of the dataset used for training, zero-shot prototypes and
/// held-out evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub prototype: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            prototype: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenConfig>,
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub splits: SplitFractions,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Checkpoint read by `evaluate` (defaults to `<out>/checkpoint.mmtw`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset_path, &self.generate) {
            (Some(_), Some(_)) => return Err(Error::config("set only one of dataset_path and generate")),
            (None, None) => return Err(Error::config("one of dataset_path or generate is required")),
            _ => {}
        }
        if let Some(g) = &self.generate {
            g.validate()?;
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.encoder.embed_dim == 0 || self.encoder.hidden_widths.contains(&0) {
            return Err(Error::config("encoder widths must be at least 1"));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        let o = &self.optimizer;
        if !(o.step_size > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return Err(Error::config("optimizer needs step_size > 0, betas in [0, 1), epsilon > 0"));
        }
        let s = &self.splits;
        if [s.train, s.prototype, s.test].iter().any(|&f| !(f > 0.0)) {
            return Err(Error::config("split fractions must be positive"));
        }
        if (s.train + s.prototype + s.test - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions sum to {}, not 1",
                s.train + s.prototype + s.test
            )));
        }
        Ok(())
    }

    /// Loads or generates the dataset named by the config. Relative dataset
    /// paths resolve against `base_dir`.
    pub fn dataset(&self, base_dir: Option<&Path>) -> Result<PairedDataset> {
        match (&self.dataset_path, &self.generate) {
            (Some(p), _) => {
                let p = match base_dir {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                let d = load_dataset(p)?;
                d.validate()?;
                Ok(d)
            }
            (None, Some(g)) => generate(g),
            (None, None) => Err(Error::config("one of dataset_path or generate is required")),
        }
    }
}

/// `lambda_align` grid crossed with repetition seeds over a base experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub lambda_align: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: ExperimentConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_align.is_empty() {
            return Err(Error::config("lambda_align list is empty"));
        }
        if self.lambda_align.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambda_align values must be finite and nonnegative"));
        }
        if self.lambda_align.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("lambda_align values must be strictly increasing"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds list is empty"));
        }
        self.base.validate()
    }
}
