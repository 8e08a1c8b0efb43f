//! Two-tower tanh encoders with a shared projection head and an independent
//! projection head per modality.
//!
//! Both heads of a tower read the same backbone activation. The shared head
//! places text and image in the common embedding space; the independent head
//! is the extra linear projection that holds modality-specific features.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Shared,
    Independent,
}

/// Encoder architecture. The independent head always has width `embed_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub text_input_dim: usize,
    pub image_input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_input_dim == 0 || self.image_input_dim == 0 {
            return Err(Error::config("encoder input dimensions must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be at least 1"));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("hidden_widths[{i}] must be at least 1")));
        }
        Ok(())
    }

    fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text_input_dim,
            Modality::Image => self.image_input_dim,
        }
    }

    fn backbone_out(&self, m: Modality) -> usize {
        self.hidden_widths.last().copied().unwrap_or(self.input_dim(m))
    }
}

/// Affine map `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("weight shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    pub backbone: Vec<Linear>,
    pub shared_head: Linear,
    pub independent_head: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoTowerModel {
    pub config: EncoderConfig,
    pub text: Tower,
    pub image: Tower,
    pub temperature: f64,
}

/// Eight unit-row feature matrices for one batch: shared (`z`), augmented
/// (`z^a`), independent (`z^i`) and augmented-independent (`z^{ia}`) for
/// each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub image: Tensor,
    pub text: Tensor,
    pub image_aug: Tensor,
    pub text_aug: Tensor,
    pub image_ind: Tensor,
    pub text_ind: Tensor,
    pub image_ind_aug: Tensor,
    pub text_ind_aug: Tensor,
}

/// [`FeatureBundle`] as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub image: Var,
    pub text: Var,
    pub image_aug: Var,
    pub text_aug: Var,
    pub image_ind: Var,
    pub text_ind: Var,
    pub image_ind_aug: Var,
    pub text_ind_aug: Var,
}

impl FeatureBundle {
    pub fn fields(&self) -> [&Tensor; 8] {
        [
            &self.image,
            &self.text,
            &self.image_aug,
            &self.text_aug,
            &self.image_ind,
            &self.text_ind,
            &self.image_ind_aug,
            &self.text_ind_aug,
        ]
    }

    /// Builds a bundle from eight matrices in [`FeatureBundle::fields`] order.
    pub fn from_fields(f: [Tensor; 8]) -> Result<FeatureBundle> {
        let [image, text, image_aug, text_aug, image_ind, text_ind, image_ind_aug, text_ind_aug] = f;
        let b = FeatureBundle {
            image,
            text,
            image_aug,
            text_aug,
            image_ind,
            text_ind,
            image_ind_aug,
            text_ind_aug,
        };
        let shape = b.image.shape().to_vec();
        if shape.len() != 2 || b.fields().iter().any(|t| t.shape() != shape.as_slice()) {
            return Err(Error::config("feature bundle fields must share one N x d shape"));
        }
        Ok(b)
    }

    pub fn batch_size(&self) -> usize {
        self.image.rows()
    }

    /// Registers every field as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BundleVars {
        BundleVars {
            image: g.leaf(self.image.clone()),
            text: g.leaf(self.text.clone()),
            image_aug: g.leaf(self.image_aug.clone()),
            text_aug: g.leaf(self.text_aug.clone()),
            image_ind: g.leaf(self.image_ind.clone()),
            text_ind: g.leaf(self.text_ind.clone()),
            image_ind_aug: g.leaf(self.image_ind_aug.clone()),
            text_ind_aug: g.leaf(self.text_ind_aug.clone()),
        }
    }
}

impl BundleVars {
    pub fn fields(&self) -> [Var; 8] {
        [
            self.image,
            self.text,
            self.image_aug,
            self.text_aug,
            self.image_ind,
            self.text_ind,
            self.image_ind_aug,
            self.text_ind_aug,
        ]
    }

    pub fn from_fields(f: [Var; 8]) -> BundleVars {
        let [image, text, image_aug, text_aug, image_ind, text_ind, image_ind_aug, text_ind_aug] = f;
        BundleVars {
            image,
            text,
            image_aug,
            text_aug,
            image_ind,
            text_ind,
            image_ind_aug,
            text_ind_aug,
        }
    }

    /// Reads the forward values back out of the graph.
    pub fn values(&self, g: &Graph) -> FeatureBundle {
        let f = self.fields().map(|v| g.value(v).clone());
        FeatureBundle::from_fields(f).expect("bundle built by the graph")
    }
}

/// Raw inputs for both modalities, paired row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedBatch {
    pub text: Tensor,
    pub image: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct LinearVars {
    weight: Var,
    bias: Var,
}

#[derive(Clone, Debug)]
struct TowerVars {
    backbone: Vec<LinearVars>,
    shared_head: LinearVars,
    independent_head: LinearVars,
}

/// Model parameters registered as leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    text: TowerVars,
    image: TowerVars,
    params: Vec<Var>,
}

impl BoundModel {
    /// Parameter leaves in declaration order (matches [`TwoTowerModel::parameters`]).
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn tower(&self, m: Modality) -> &TowerVars {
        match m {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    /// Backbone activations (after the last tanh) for a batch of raw inputs.
    pub fn backbone(&self, g: &mut Graph, x: Var, m: Modality) -> Result<Var> {
        let mut h = x;
        for layer in &self.tower(m).backbone {
            h = affine(g, h, layer)?;
            h = g.tanh(h);
        }
        Ok(h)
    }

    /// Unit-row projection of backbone activations through one head.
    pub fn project(&self, g: &mut Graph, hidden: Var, m: Modality, head: Head) -> Result<Var> {
        let t = self.tower(m);
        let layer = match head {
            Head::Shared => &t.shared_head,
            Head::Independent => &t.independent_head,
        };
        let z = affine(g, hidden, layer)?;
        g.row_normalize(z)
    }

    pub fn encode(&self, g: &mut Graph, x: Var, m: Modality, head: Head) -> Result<Var> {
        let h = self.backbone(g, x, m)?;
        self.project(g, h, m, head)
    }

    /// Routes raw and augmented inputs through both heads of both towers.
    pub fn forward_bundle(&self, g: &mut Graph, batch: &PairedBatch, augmented: &PairedBatch) -> Result<BundleVars> {
        check_pair(batch, augmented)?;
        let mut heads = |x: &Tensor, m: Modality| -> Result<(Var, Var)> {
            let xv = g.leaf(x.clone());
            let h = self.backbone(g, xv, m)?;
            Ok((self.project(g, h, m, Head::Shared)?, self.project(g, h, m, Head::Independent)?))
        };
        let (image, image_ind) = heads(&batch.image, Modality::Image)?;
        let (text, text_ind) = heads(&batch.text, Modality::Text)?;
        let (image_aug, image_ind_aug) = heads(&augmented.image, Modality::Image)?;
        let (text_aug, text_ind_aug) = heads(&augmented.text, Modality::Text)?;
        Ok(BundleVars {
            image,
            text,
            image_aug,
            text_aug,
            image_ind,
            text_ind,
            image_ind_aug,
            text_ind_aug,
        })
    }
}

fn affine(g: &mut Graph, x: Var, l: &LinearVars) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add_row_broadcast(y, l.bias)
}

fn check_pair(batch: &PairedBatch, augmented: &PairedBatch) -> Result<()> {
    if batch.text.shape() != augmented.text.shape() || batch.image.shape() != augmented.image.shape() {
        return Err(Error::config("batch and augmented batch must have the same shapes"));
    }
    if batch.text.rows() != batch.image.rows() {
        return Err(Error::config(format!(
            "text batch has {} rows but image batch has {}",
            batch.text.rows(),
            batch.image.rows()
        )));
    }
    Ok(())
}

impl TwoTowerModel {
    /// Uniform `±1/sqrt(fan_in)` weights and zero biases, drawn from a
    /// ChaCha stream seeded by `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<TwoTowerModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let backbone = |m: Modality, rng: &mut ChaCha8Rng| {
            let mut fan_in = config.input_dim(m);
            config
                .hidden_widths
                .iter()
                .map(|&w| {
                    let l = Linear::init(fan_in, w, rng);
                    fan_in = w;
                    l
                })
                .collect::<Vec<_>>()
        };
        let text_backbone = backbone(Modality::Text, &mut rng);
        let image_backbone = backbone(Modality::Image, &mut rng);
        let d = config.embed_dim;
        let text_shared = Linear::init(config.backbone_out(Modality::Text), d, &mut rng);
        let image_shared = Linear::init(config.backbone_out(Modality::Image), d, &mut rng);
        let text_ind = Linear::init(config.backbone_out(Modality::Text), d, &mut rng);
        let image_ind = Linear::init(config.backbone_out(Modality::Image), d, &mut rng);
        Ok(TwoTowerModel {
            config,
            text: Tower {
                backbone: text_backbone,
                shared_head: text_shared,
                independent_head: text_ind,
            },
            image: Tower {
                backbone: image_backbone,
                shared_head: image_shared,
                independent_head: image_ind,
            },
            temperature: DEFAULT_TEMPERATURE,
        })
    }

    /// All parameter tensors in declaration order: text backbone, image
    /// backbone, shared heads (text, image), independent heads (text, image).
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.text.backbone.iter().chain(&self.image.backbone) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for l in [
            &self.text.shared_head,
            &self.image.shared_head,
            &self.text.independent_head,
            &self.image.independent_head,
        ] {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.text.backbone.iter_mut().chain(self.image.backbone.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in [
            &mut self.text.shared_head,
            &mut self.image.shared_head,
            &mut self.text.independent_head,
            &mut self.image.independent_head,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let mut params = Vec::new();
        let mut lin = |g: &mut Graph, l: &Linear| {
            let weight = g.leaf(l.weight.clone());
            let bias = g.leaf(l.bias.clone());
            params.push(weight);
            params.push(bias);
            LinearVars { weight, bias }
        };
        let text_bb: Vec<_> = self.text.backbone.iter().map(|l| lin(g, l)).collect();
        let image_bb: Vec<_> = self.image.backbone.iter().map(|l| lin(g, l)).collect();
        let text_shared = lin(g, &self.text.shared_head);
        let image_shared = lin(g, &self.image.shared_head);
        let text_ind = lin(g, &self.text.independent_head);
        let image_ind = lin(g, &self.image.independent_head);
        BoundModel {
            text: TowerVars {
                backbone: text_bb,
                shared_head: text_shared,
                independent_head: text_ind,
            },
            image: TowerVars {
                backbone: image_bb,
                shared_head: image_shared,
                independent_head: image_ind,
            },
            params,
        }
    }

    fn check_input(&self, x: &Tensor, m: Modality) -> Result<()> {
        let want = self.config.input_dim(m);
        if !x.is_matrix() || x.cols() != want {
            return Err(Error::config(format!(
                "{m:?} input must be N x {want}, got shape {:?}",
                x.shape()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!("{m:?} input contains non-finite values")));
        }
        Ok(())
    }

    /// Encodes a raw batch into unit rows of the chosen head.
    pub fn encode(&self, x: &Tensor, m: Modality, head: Head) -> Result<Tensor> {
        self.check_input(x, m)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let z = bound.encode(&mut g, xv, m, head)?;
        Ok(g.value(z).clone())
    }

    /// Backbone activations, exposed for inspection.
    pub fn backbone_activations(&self, x: &Tensor, m: Modality) -> Result<Tensor> {
        self.check_input(x, m)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let xv = g.leaf(x.clone());
        let h = bound.backbone(&mut g, xv, m)?;
        Ok(g.value(h).clone())
    }

    pub fn forward_bundle(&self, batch: &PairedBatch, augmented: &PairedBatch) -> Result<FeatureBundle> {
        self.check_input(&batch.text, Modality::Text)?;
        self.check_input(&batch.image, Modality::Image)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let vars = bound.forward_bundle(&mut g, batch, augmented)?;
        Ok(vars.values(&g))
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.is_finite())
    }
}
