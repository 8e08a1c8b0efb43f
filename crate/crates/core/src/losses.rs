//! Contrastive loss and the latent-structure regularizers, all built from
//! graph primitives so that every term is differentiable.
//!
//! Every function takes unit-row feature matrices already registered in a
//! [`Graph`] and returns a scalar node.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::BundleVars;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeTimeMode {
    Fixed,
    SampledUniform,
}

/// Weights for each term of the final loss plus the loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_align: f64,
    pub lambda_sep: f64,
    pub lambda_br: f64,
    pub lambda_gc: f64,
    pub temperature: f64,
    pub bridge_time: f64,
    pub bridge_time_mode: BridgeTimeMode,
    pub kernel_scale: f64,
    pub align_epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_con: 1.0,
            lambda_align: 1.0,
            lambda_sep: 1.0,
            lambda_br: 1.0,
            lambda_gc: 1.0,
            temperature: 0.07,
            bridge_time: 0.25,
            bridge_time_mode: BridgeTimeMode::Fixed,
            kernel_scale: 2.0,
            align_epsilon: 1e-3,
        }
    }
}

impl LossWeights {
    /// Only the contrastive term switched on.
    pub fn contrastive_only() -> Self {
        LossWeights {
            lambda_align: 0.0,
            lambda_sep: 0.0,
            lambda_br: 0.0,
            lambda_gc: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_con", self.lambda_con),
            ("lambda_align", self.lambda_align),
            ("lambda_sep", self.lambda_sep),
            ("lambda_br", self.lambda_br),
            ("lambda_gc", self.lambda_gc),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.bridge_time > 0.0 && self.bridge_time < 1.0) {
            return Err(Error::config(format!("bridge_time must lie in (0, 1), got {}", self.bridge_time)));
        }
        if !(self.kernel_scale > 0.0 && self.kernel_scale.is_finite()) {
            return Err(Error::config(format!("kernel_scale must be positive, got {}", self.kernel_scale)));
        }
        if !(self.align_epsilon > 0.0 && self.align_epsilon.is_finite()) {
            return Err(Error::config(format!("align_epsilon must be positive, got {}", self.align_epsilon)));
        }
        Ok(())
    }

    /// Bridge time for one loss evaluation.
    pub fn draw_bridge_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.bridge_time_mode {
            BridgeTimeMode::Fixed => self.bridge_time,
            BridgeTimeMode::SampledUniform => loop {
                let t: f64 = rng.random();
                if t > 0.0 {
                    break t;
                }
            },
        }
    }
}

/// Values of every loss term for one evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_align: f64,
    pub l_ortho: f64,
    pub l_con_i: f64,
    pub l_uni_i: f64,
    pub l_sep: f64,
    pub l_br: f64,
    pub l_gc: f64,
    pub l_gc_a: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(name, value)` for every term, in CSV column order.
    pub fn named_terms(&self) -> [(&'static str, f64); 9] {
        [
            ("l_con", self.l_con),
            ("l_align", self.l_align),
            ("l_ortho", self.l_ortho),
            ("l_con_i", self.l_con_i),
            ("l_uni_i", self.l_uni_i),
            ("l_br", self.l_br),
            ("l_gc", self.l_gc),
            ("l_gc_a", self.l_gc_a),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.named_terms()
            .into_iter()
            .chain([("l_sep", self.l_sep)])
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    /// Termwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.l_con += b.l_con;
            acc.l_align += b.l_align;
            acc.l_ortho += b.l_ortho;
            acc.l_con_i += b.l_con_i;
            acc.l_uni_i += b.l_uni_i;
            acc.l_sep += b.l_sep;
            acc.l_br += b.l_br;
            acc.l_gc += b.l_gc;
            acc.l_gc_a += b.l_gc_a;
            acc.total += b.total;
        }
        LossBreakdown {
            l_con: acc.l_con / n,
            l_align: acc.l_align / n,
            l_ortho: acc.l_ortho / n,
            l_con_i: acc.l_con_i / n,
            l_uni_i: acc.l_uni_i / n,
            l_sep: acc.l_sep / n,
            l_br: acc.l_br / n,
            l_gc: acc.l_gc / n,
            l_gc_a: acc.l_gc_a / n,
            total: acc.total / n,
        }
    }
}

/// Graph nodes for every term of [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_con: Var,
    pub l_align: Var,
    pub l_ortho: Var,
    pub l_con_i: Var,
    pub l_uni_i: Var,
    pub l_sep: Var,
    pub l_br: Var,
    pub l_gc: Var,
    pub l_gc_a: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_con: g.scalar(self.l_con),
            l_align: g.scalar(self.l_align),
            l_ortho: g.scalar(self.l_ortho),
            l_con_i: g.scalar(self.l_con_i),
            l_uni_i: g.scalar(self.l_uni_i),
            l_sep: g.scalar(self.l_sep),
            l_br: g.scalar(self.l_br),
            l_gc: g.scalar(self.l_gc),
            l_gc_a: g.scalar(self.l_gc_a),
            total: g.scalar(self.total),
        }
    }
}

fn batch_rows(g: &Graph, v: Var) -> Result<usize> {
    let t = g.value(v);
    if !t.is_matrix() {
        return Err(Error::config(format!("expected an N x d feature matrix, got {:?}", t.shape())));
    }
    if t.rows() == 0 {
        return Err(Error::config("batch size N must be at least 1"));
    }
    Ok(t.rows())
}

fn same_shapes(g: &Graph, name: &str, vars: &[Var]) -> Result<()> {
    let first = g.value(vars[0]).shape();
    for v in &vars[1..] {
        if g.value(*v).shape() != first {
            return Err(Error::config(format!(
                "{name}: shape mismatch {first:?} vs {:?}",
                g.value(*v).shape()
            )));
        }
    }
    Ok(())
}

/// `-(1/N) sum_j log( exp(<a_j,p_j>/tau) / sum_k exp(<a_j,d_k>/tau) )`,
/// evaluated through a row-wise log-sum-exp.
pub fn nce_term(g: &mut Graph, anchors: Var, positives: Var, denominators: Var, tau: f64) -> Result<Var> {
    batch_rows(g, anchors)?;
    same_shapes(g, "nce_term", &[anchors, positives])?;
    if g.value(denominators).cols() != g.value(anchors).cols() {
        return Err(Error::config("nce_term: denominator set width differs from anchors"));
    }
    let sims = g.gram(anchors, denominators)?;
    let logits = g.scale(sims, 1.0 / tau);
    let lse = g.logsumexp_rows(logits)?;
    let pos = g.row_dot(anchors, positives)?;
    let pos = g.scale(pos, 1.0 / tau);
    let per_row = g.sub(lse, pos)?;
    g.mean(per_row)
}

/// Four-direction contrastive loss: `(V2T + T2V + V2V + T2T) / 4`.
pub fn l_con(g: &mut Graph, b: &BundleVars, tau: f64) -> Result<Var> {
    let v2t = nce_term(g, b.image, b.text, b.text, tau)?;
    let t2v = nce_term(g, b.text, b.image, b.image, tau)?;
    let v2v = nce_term(g, b.image, b.image_aug, b.image, tau)?;
    let t2t = nce_term(g, b.text, b.text_aug, b.text, tau)?;
    let s = g.add(v2t, t2v)?;
    let s = g.add(s, v2v)?;
    let s = g.add(s, t2t)?;
    Ok(g.scale(s, 0.25))
}

/// `(1/N) sum_j 1 / max(<t_j, v_j>, eps)^2`.
pub fn l_align(g: &mut Graph, image: Var, text: Var, eps: f64) -> Result<Var> {
    batch_rows(g, image)?;
    same_shapes(g, "l_align", &[image, text])?;
    let cos = g.row_dot(text, image)?;
    let clamped = g.clamp_min(cos, eps);
    let log = g.log(clamped)?;
    let inv_sq = g.scale(log, -2.0);
    let inv_sq = g.exp(inv_sq);
    g.mean(inv_sq)
}

/// `(1/N) sum_j (<v_j, v^i_j>^2 + <t_j, t^i_j>^2)`.
pub fn l_ortho(g: &mut Graph, image: Var, image_ind: Var, text: Var, text_ind: Var) -> Result<Var> {
    let n = batch_rows(g, image)?;
    same_shapes(g, "l_ortho", &[image, image_ind, text, text_ind])?;
    let cv = g.row_dot(image, image_ind)?;
    let ct = g.row_dot(text, text_ind)?;
    let cv = g.square(cv);
    let ct = g.square(ct);
    let s = g.add(cv, ct)?;
    let s = g.sum(s);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// In-modal contrastive loss on the independent features (V2V + T2T, not averaged).
pub fn l_con_indep(g: &mut Graph, b: &BundleVars, tau: f64) -> Result<Var> {
    let v = nce_term(g, b.image_ind, b.image_ind_aug, b.image_ind, tau)?;
    let t = nce_term(g, b.text_ind, b.text_ind_aug, b.text_ind, tau)?;
    g.add(v, t)
}

/// `log (1/N) sum_{j,k} [G(v^i_j, v^i_k) + G(t^i_j, t^i_k)]` with
/// `G(u, w) = exp(-scale ||u - w||^2)`.
pub fn l_uniformity(g: &mut Graph, image_ind: Var, text_ind: Var, kernel_scale: f64) -> Result<Var> {
    let n = batch_rows(g, image_ind)?;
    same_shapes(g, "l_uniformity", &[image_ind, text_ind])?;
    let mut potential = |x: Var| -> Result<Var> {
        let d = g.pairwise_sq_dist(x, x)?;
        let d = g.scale(d, -kernel_scale);
        let k = g.exp(d);
        Ok(g.sum(k))
    };
    let pv = potential(image_ind)?;
    let pt = potential(text_ind)?;
    let s = g.add(pv, pt)?;
    let s = g.scale(s, 1.0 / n as f64);
    g.log(s)
}

/// Deep feature separation: `L_ortho + L_con^i + L_uni^i`.
pub fn l_sep(g: &mut Graph, b: &BundleVars, tau: f64, kernel_scale: f64) -> Result<Var> {
    let parts = sep_parts(g, b, tau, kernel_scale)?;
    let s = g.add(parts.0, parts.1)?;
    g.add(s, parts.2)
}

fn sep_parts(g: &mut Graph, b: &BundleVars, tau: f64, kernel_scale: f64) -> Result<(Var, Var, Var)> {
    let ortho = l_ortho(g, b.image, b.image_ind, b.text, b.text_ind)?;
    let con_i = l_con_indep(g, b, tau)?;
    let uni = l_uniformity(g, b.image_ind, b.text_ind, kernel_scale)?;
    Ok((ortho, con_i, uni))
}

/// Row-wise bridge mean `(t v + (1-t) w) / ||t v + (1-t) w||`.
pub fn bridge_mean(g: &mut Graph, image: Var, text: Var, t: f64) -> Result<Var> {
    same_shapes(g, "bridge_mean", &[image, text])?;
    let a = g.scale(image, t);
    let b = g.scale(text, 1.0 - t);
    let s = g.add(a, b)?;
    g.row_normalize(s).map_err(|e| match e {
        Error::Domain { row, detail, .. } => Error::Domain {
            op: "bridge-mean",
            row,
            detail: format!("degenerate bridge midpoint ({detail})"),
        },
        other => other,
    })
}

/// `(1/N) sum_j ||v^a_j - mu(v_j, t_j, t)||^2`.
pub fn l_bridge(g: &mut Graph, image_aug: Var, image: Var, text: Var, t: f64) -> Result<Var> {
    let n = batch_rows(g, image)?;
    same_shapes(g, "l_bridge", &[image_aug, image, text])?;
    let mu = bridge_mean(g, image, text, t)?;
    let diff = g.sub(image_aug, mu)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Cross-modal symmetry plus in-modal gram matching between image and text.
pub fn l_gc(g: &mut Graph, image: Var, text: Var) -> Result<Var> {
    let n = batch_rows(g, image)?;
    same_shapes(g, "l_gc", &[image, text])?;
    let cross = g.gram(image, text)?;
    let cross_t = g.transpose(cross)?;
    let asym = g.sub(cross, cross_t)?;
    let gv = g.gram(image, image)?;
    let gt = g.gram(text, text)?;
    let gdiff = g.sub(gv, gt)?;
    let a = g.square(asym);
    let a = g.sum(a);
    let b = g.square(gdiff);
    let b = g.sum(b);
    let s = g.add(a, b)?;
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Gram consistency between original and augmented features, plus the
/// paired cross-modal similarity consistency.
pub fn l_gc_aug(g: &mut Graph, b: &BundleVars) -> Result<Var> {
    let n = batch_rows(g, b.image)?;
    same_shapes(g, "l_gc_aug", &[b.image, b.text, b.image_aug, b.text_aug])?;
    let mut gram_gap = |x: Var, xa: Var| -> Result<Var> {
        let gx = g.gram(x, x)?;
        let gxa = g.gram(xa, xa)?;
        let d = g.sub(gx, gxa)?;
        let d = g.square(d);
        Ok(g.sum(d))
    };
    let dv = gram_gap(b.image, b.image_aug)?;
    let dt = gram_gap(b.text, b.text_aug)?;
    let double = g.add(dv, dt)?;
    let double = g.scale(double, 1.0 / n as f64);

    let pair = g.row_dot(b.image, b.text)?;
    let pair_a = g.row_dot(b.image_aug, b.text_aug)?;
    let pd = g.sub(pair, pair_a)?;
    let pd = g.square(pd);
    let paired = g.mean(pd)?;
    g.add(double, paired)
}

/// Every term plus the weighted total
/// `l_con*L_con + l_align*L_align + l_sep*L_sep + l_br*L_br + l_gc*(L_gc + L_gc^a)`.
///
/// All terms are evaluated for reporting; terms with zero weight are left
/// out of the total so they contribute no gradient.
pub fn total_loss<R: Rng + ?Sized>(g: &mut Graph, b: &BundleVars, w: &LossWeights, rng: &mut R) -> Result<LossNodes> {
    w.validate()?;
    let t = w.draw_bridge_time(rng);
    let con = l_con(g, b, w.temperature)?;
    let align = l_align(g, b.image, b.text, w.align_epsilon)?;
    let (ortho, con_i, uni) = sep_parts(g, b, w.temperature, w.kernel_scale)?;
    let sep = g.add(ortho, con_i)?;
    let sep = g.add(sep, uni)?;
    let br = l_bridge(g, b.image_aug, b.image, b.text, t)?;
    let gc = l_gc(g, b.image, b.text)?;
    let gc_a = l_gc_aug(g, b)?;
    let gc_total = g.add(gc, gc_a)?;

    let mut total: Option<Var> = None;
    for (lambda, term) in [
        (w.lambda_con, con),
        (w.lambda_align, align),
        (w.lambda_sep, sep),
        (w.lambda_br, br),
        (w.lambda_gc, gc_total),
    ] {
        if lambda == 0.0 {
            continue;
        }
        let weighted = g.scale(term, lambda);
        total = Some(match total {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = total.unwrap_or_else(|| g.leaf(crate::autodiff::Tensor::scalar(0.0)));

    Ok(LossNodes {
        l_con: con,
        l_align: align,
        l_ortho: ortho,
        l_con_i: con_i,
        l_uni_i: uni,
        l_sep: sep,
        l_br: br,
        l_gc: gc,
        l_gc_a: gc_a,
        total,
    })
}

/// Evaluates [`total_loss`] on plain feature matrices.
pub fn evaluate_total<R: Rng + ?Sized>(
    bundle: &crate::model::FeatureBundle,
    w: &LossWeights,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let vars = bundle.bind(&mut g);
    let nodes = total_loss(&mut g, &vars, w, rng)?;
    Ok(nodes.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.scalar(v)
    }

    const E1: &[f64] = &[1.0, 0.0];
    const E2: &[f64] = &[0.0, 1.0];

    #[test]
    fn nce_single_pair_is_zero() {
        let v = eval(|g| {
            let a = g.leaf(m(&[E1]));
            nce_term(g, a, a, a, 1.0)
        });
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn nce_orthonormal_pair() {
        let v = eval(|g| {
            let a = g.leaf(m(&[E1, E2]));
            nce_term(g, a, a, a, 1.0)
        });
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn nce_empty_batch_is_config_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[0, 2]));
        assert!(matches!(nce_term(&mut g, a, a, a, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn align_values() {
        let same = eval(|g| {
            let a = g.leaf(m(&[E1, E2]));
            l_align(g, a, a, 1e-3)
        });
        assert!((same - 1.0).abs() < 1e-12);

        let h = 0.5f64;
        let s = (1.0 - h * h).sqrt();
        let half = eval(|g| {
            let v = g.leaf(m(&[E1, E2]));
            let t = g.leaf(m(&[&[h, s], &[s, h]]));
            l_align(g, v, t, 1e-3)
        });
        assert!((half - 4.0).abs() < 1e-9);

        let clamped = eval(|g| {
            let v = g.leaf(m(&[E1]));
            let t = g.leaf(m(&[E2]));
            l_align(g, v, t, 1e-3)
        });
        assert!((clamped - 1e6).abs() < 1e-3);
    }

    #[test]
    fn ortho_values() {
        let zero = eval(|g| {
            let z = g.leaf(m(&[E1]));
            let zi = g.leaf(m(&[E2]));
            l_ortho(g, z, zi, z, zi)
        });
        assert_eq!(zero, 0.0);

        let two = eval(|g| {
            let z = g.leaf(m(&[E1, E2]));
            l_ortho(g, z, z, z, z)
        });
        assert!((two - 2.0).abs() < 1e-15);

        // image cosines {0.6, 0}, text cosines {0, 0.8}
        let half = eval(|g| {
            let zv = g.leaf(m(&[E1, E1]));
            let zvi = g.leaf(m(&[&[0.6, 0.8], E2]));
            let zt = g.leaf(m(&[E1, E1]));
            let zti = g.leaf(m(&[E2, &[0.8, 0.6]]));
            l_ortho(g, zv, zvi, zt, zti)
        });
        assert!((half - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniformity_values() {
        let same = eval(|g| {
            let z = g.leaf(m(&[E1, E1]));
            l_uniformity(g, z, z, 2.0)
        });
        assert!((same - 4f64.ln()).abs() < 1e-12);

        let anti = eval(|g| {
            let z = g.leaf(m(&[&[1.0, 0.0], &[-1.0, 0.0]]));
            l_uniformity(g, z, z, 2.0)
        });
        assert!((anti - (2.0 + 2.0 * (-8f64).exp()).ln()).abs() < 1e-12);

        let single = eval(|g| {
            let z = g.leaf(m(&[E2]));
            l_uniformity(g, z, z, 2.0)
        });
        assert!((single - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bridge_mean_values() {
        let mut g = Graph::new();
        let v = g.leaf(m(&[E1]));
        let t = g.leaf(m(&[E2]));
        let mid = bridge_mean(&mut g, v, t, 0.5).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!(g.value(mid).data().iter().all(|x| (x - r).abs() < 1e-15));

        let q = bridge_mean(&mut g, v, t, 0.25).unwrap();
        let d = g.value(q).data();
        let norm = 0.625f64.sqrt();
        assert!((d[0] - 0.25 / norm).abs() < 1e-15);
        assert!((d[1] - 0.75 / norm).abs() < 1e-15);

        let same = bridge_mean(&mut g, v, v, 0.9).unwrap();
        assert_eq!(g.value(same).data(), E1);
    }

    #[test]
    fn bridge_mean_antipodal_is_domain_error() {
        let mut g = Graph::new();
        let v = g.leaf(m(&[E2, E1]));
        let t = g.leaf(m(&[E1, &[-1.0, 0.0]]));
        match bridge_mean(&mut g, v, t, 0.5) {
            Err(Error::Domain { op, row, .. }) => {
                assert_eq!(op, "bridge-mean");
                assert_eq!(row, 1);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn bridge_loss_values() {
        let orth = eval(|g| {
            let za = g.leaf(m(&[E1]));
            let z = g.leaf(m(&[E2]));
            l_bridge(g, za, z, z, 0.25)
        });
        assert!((orth - 2.0).abs() < 1e-15);

        let v = eval(|g| {
            let za = g.leaf(m(&[E1]));
            let zv = g.leaf(m(&[E1]));
            let zt = g.leaf(m(&[E2]));
            l_bridge(g, za, zv, zt, 0.25)
        });
        assert!((v - (2.0 - 2.0 * 0.25 / 0.625f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn gc_values() {
        let v = eval(|g| {
            let zv = g.leaf(m(&[E1, E2]));
            let zt = g.leaf(m(&[E1, E1]));
            l_gc(g, zv, zt)
        });
        assert!((v - 2.0).abs() < 1e-15);

        let single = eval(|g| {
            let zv = g.leaf(m(&[E1]));
            let zt = g.leaf(m(&[E2]));
            l_gc(g, zv, zt)
        });
        assert_eq!(single, 0.0);
    }
}
