//! Training loop, optimizer and held-out evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, OptimizerConfig, SplitFractions};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{
    alignment_uniformity, centroid_gap, linear_probe, paired_gap, recall_at_k, zero_shot_accuracy, MetricsReport,
    ProbeConfig,
};
use crate::model::{EncoderConfig, Head, Modality, PairedBatch, TwoTowerModel};
use crate::synthdata::{augment, AugmentConfig, PairedDataset};

/// SplitMix64 finalizer; derives independent seeds from one experiment seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_MODEL: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_BRIDGE: u64 = 4;
const TAG_SPLIT: u64 = 5;

/// Adam with bias correction.
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= c.step_size * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
    }
}

/// Row indices of each split.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub prototype: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, cut by the fractions.
pub fn split_indices(n: usize, f: &SplitFractions, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SPLIT)));
    let n_train = (f.train * n as f64).round() as usize;
    let n_proto = ((f.prototype * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = idx.split_off(n_train + n_proto);
    let prototype = idx.split_off(n_train);
    Splits {
        train: idx,
        prototype,
        test,
    }
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TwoTowerModel,
    /// Mean loss breakdown of each epoch.
    pub epochs: Vec<LossBreakdown>,
    pub metrics: MetricsReport,
    pub splits: Splits,
    /// Shared-head embeddings of the test split.
    pub test_text: Tensor,
    pub test_image: Tensor,
}

pub fn build_model(cfg: &ExperimentConfig, data: &PairedDataset) -> Result<TwoTowerModel> {
    let mut model = TwoTowerModel::new(EncoderConfig {
        text_input_dim: data.text.cols(),
        image_input_dim: data.image.cols(),
        hidden_widths: cfg.encoder.hidden_widths.clone(),
        embed_dim: cfg.encoder.embed_dim,
        seed: derive_seed(cfg.seed, TAG_MODEL),
    })?;
    model.temperature = cfg.loss.temperature;
    Ok(model)
}

/// Trains from scratch and evaluates on the held-out split.
pub fn train(cfg: &ExperimentConfig, data: &PairedDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    let splits = split_indices(data.len(), &cfg.splits, cfg.seed);
    if cfg.epochs > 0 && splits.train.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "training split has {} rows, fewer than batch_size {}",
            splits.train.len(),
            cfg.batch_size
        )));
    }
    let mut model = build_model(cfg, data)?;
    let mut opt = Adam::new(cfg.optimizer.clone(), model.parameters().iter().map(|p| p.len()));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SHUFFLE));
    let mut bridge_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_BRIDGE));
    let aug = AugmentConfig {
        stream: derive_seed(cfg.seed ^ cfg.augment.stream, TAG_AUGMENT),
        ..cfg.augment.clone()
    };
    let mut aug_calls = 0u64;
    let mut order = splits.train.clone();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut rows = Vec::new();
        for (bi, batch_idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let batch = PairedBatch {
                text: data.text.select_rows(batch_idx),
                image: data.image.select_rows(batch_idx),
            };
            let augmented = PairedBatch {
                text: augment(&batch.text, &aug, aug_calls)?,
                image: augment(&batch.image, &aug, aug_calls + 1)?,
            };
            aug_calls += 2;

            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let vars = bound.forward_bundle(&mut g, &batch, &augmented)?;
            let nodes = total_loss(&mut g, &vars, &cfg.loss, &mut bridge_rng)?;
            let breakdown = nodes.breakdown(&g);
            if let Some(term) = breakdown.first_non_finite() {
                return Err(Error::Numeric(format!(
                    "loss term {term} became non-finite at epoch {epoch}, batch {bi}"
                )));
            }
            let grads = g.gradients(nodes.total, bound.params())?;
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, batch {bi}")));
            }
            opt.step(model.parameters_mut(), &grads);
            rows.push(breakdown);
        }
        epochs.push(LossBreakdown::mean(&rows));
    }

    let eval = evaluate(&model, data, &splits, &cfg.probe)?;
    Ok(TrainOutcome {
        model,
        epochs,
        metrics: eval.metrics,
        splits,
        test_text: eval.test_text,
        test_image: eval.test_image,
    })
}

pub struct Evaluation {
    pub metrics: MetricsReport,
    pub test_text: Tensor,
    pub test_image: Tensor,
}

/// Image features used by a linear probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeFeatures {
    Shared,
    /// Shared and independent head outputs side by side.
    SharedAndIndependent,
}

pub fn image_features(model: &TwoTowerModel, x: &Tensor, which: ProbeFeatures) -> Result<Tensor> {
    let shared = model.encode(x, Modality::Image, Head::Shared)?;
    match which {
        ProbeFeatures::Shared => Ok(shared),
        ProbeFeatures::SharedAndIndependent => {
            let ind = model.encode(x, Modality::Image, Head::Independent)?;
            shared.hconcat(&ind)
        }
    }
}

/// Linear probe on frozen image features: fit on the train split, score on the test split.
pub fn probe_accuracy(
    model: &TwoTowerModel,
    data: &PairedDataset,
    splits: &Splits,
    probe: &ProbeConfig,
    which: ProbeFeatures,
) -> Result<f64> {
    let train_x = image_features(model, &data.image.select_rows(&splits.train), which)?;
    let test_x = image_features(model, &data.image.select_rows(&splits.test), which)?;
    let train_y: Vec<usize> = splits.train.iter().map(|&i| data.labels[i]).collect();
    let test_y: Vec<usize> = splits.test.iter().map(|&i| data.labels[i]).collect();
    linear_probe(&train_x, &train_y, &test_x, &test_y, data.num_classes, probe)
}

/// Computes the full [`MetricsReport`] on the held-out split.
pub fn evaluate(model: &TwoTowerModel, data: &PairedDataset, splits: &Splits, probe: &ProbeConfig) -> Result<Evaluation> {
    if splits.test.len() < 10 {
        return Err(Error::config(format!(
            "test split has {} rows; recall@10 needs at least 10",
            splits.test.len()
        )));
    }
    let test_text = model.encode(&data.text.select_rows(&splits.test), Modality::Text, Head::Shared)?;
    let test_image = model.encode(&data.image.select_rows(&splits.test), Modality::Image, Head::Shared)?;
    let test_labels: Vec<usize> = splits.test.iter().map(|&i| data.labels[i]).collect();

    let proto_text = model.encode(&data.text.select_rows(&splits.prototype), Modality::Text, Head::Shared)?;
    let proto_labels: Vec<usize> = splits.prototype.iter().map(|&i| data.labels[i]).collect();
    let zero_shot = zero_shot_accuracy(&test_image, &test_labels, &proto_text, &proto_labels, data.num_classes)?;

    let (alignment_stat, uniformity_stat) = alignment_uniformity(&test_text, &test_image)?;
    let metrics = MetricsReport {
        paired_gap: paired_gap(&test_text, &test_image)?,
        centroid_gap: centroid_gap(&test_text, &test_image)?,
        r_at_1_i2t: recall_at_k(&test_image, &test_text, 1)?,
        r_at_5_i2t: recall_at_k(&test_image, &test_text, 5)?,
        r_at_10_i2t: recall_at_k(&test_image, &test_text, 10)?,
        r_at_1_t2i: recall_at_k(&test_text, &test_image, 1)?,
        r_at_5_t2i: recall_at_k(&test_text, &test_image, 5)?,
        r_at_10_t2i: recall_at_k(&test_text, &test_image, 10)?,
        zero_shot_accuracy: zero_shot,
        linear_probe_accuracy: probe_accuracy(model, data, splits, probe, ProbeFeatures::Shared)?,
        alignment_stat,
        uniformity_stat,
    };
    Ok(Evaluation {
        metrics,
        test_text,
        test_image,
    })
}

/// Loss-curve CSV text.
pub fn loss_curve_csv(epochs: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,l_con,l_align,l_ortho,l_con_i,l_uni_i,l_br,l_gc,l_gc_a,total\n");
    for (i, e) in epochs.iter().enumerate() {
        out.push_str(&i.to_string());
        for (_, v) in e.named_terms() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}
