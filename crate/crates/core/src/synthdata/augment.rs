use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Additive Gaussian noise followed by independent coordinate dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub dropout: f64,
    #[serde(default)]
    pub stream: u64,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            noise_std: 0.0,
            dropout: 0.0,
            stream: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config(format!("augment noise_std must be nonnegative, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("augment dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Augments `x`. The randomness depends only on `(cfg.stream, call_index)`.
pub fn augment(x: &Tensor, cfg: &AugmentConfig, call_index: u64) -> Result<Tensor> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream);
    rng.set_stream(call_index);
    let mut out = x.clone();
    for v in out.data_mut() {
        if cfg.noise_std > 0.0 {
            let e: f64 = rng.sample(StandardNormal);
            *v += cfg.noise_std * e;
        }
        if cfg.dropout > 0.0 && rng.random::<f64>() < cfg.dropout {
            *v = 0.0;
        }
    }
    Ok(out)
}
