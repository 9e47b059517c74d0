//! Training objective: least-squares adversarial terms, cycle consistency,
//! pixel consistency against the approximately paired partner image, and
//! their weighted total.
//!
//! L1 norms are realized as per-element means so magnitudes do not depend on
//! image resolution. Each term exists twice: as a graph node for training
//! and as a plain function over tensors, the latter built on the former.

use nirgan_tensor::{Graph, NodeId, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the cycle-consistency term.
    pub lambda_cyc: f64,
    /// Weight of the pixel-consistency term.
    pub gamma_pc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 1.0,
            gamma_pc: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cyc", self.lambda_cyc), ("gamma_pc", self.gamma_pc)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss: {name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generator-side terms of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc: f64,
    pub pc: f64,
}

/// Every loss value of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub adv_g: f64,
    pub adv_f: f64,
    pub d_v: f64,
    pub d_n: f64,
    pub cyc: f64,
    pub pc: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn terms(&self) -> ObjectiveTerms {
        ObjectiveTerms {
            adv_g: self.adv_g,
            adv_f: self.adv_f,
            cyc: self.cyc,
            pc: self.pc,
        }
    }

    /// Name of the first non-finite field, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("adv_g", self.adv_g),
            ("adv_f", self.adv_f),
            ("d_v", self.d_v),
            ("d_n", self.d_n),
            ("cyc", self.cyc),
            ("pc", self.pc),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `adv_g + adv_f + λ·cyc + γ·pc`.
pub fn total_objective(terms: &ObjectiveTerms, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let ObjectiveTerms { adv_g, adv_f, cyc, pc } = *terms;
    if let Some(name) = [("adv_g", adv_g), ("adv_f", adv_f), ("cyc", cyc), ("pc", pc)]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    {
        return Err(Error::Numeric(format!("objective term {name} is not finite")));
    }
    Ok(adv_g + adv_f + weights.lambda_cyc * cyc + weights.gamma_pc * pc)
}

/// Discriminator target: `mean((real − 1)²) + mean(fake²)`.
pub fn lsgan_discriminator_node<T: Scalar>(
    g: &mut Graph<T>,
    real_scores: NodeId,
    fake_scores: NodeId,
) -> Result<NodeId> {
    let real = g.mean_squared_to(real_scores, 1.0);
    let fake = g.mean_squared_to(fake_scores, 0.0);
    Ok(g.weighted_sum(&[(real, 1.0), (fake, 1.0)])?)
}

/// Generator target: `mean((fake − 1)²)`.
pub fn lsgan_generator_node<T: Scalar>(g: &mut Graph<T>, fake_scores: NodeId) -> NodeId {
    g.mean_squared_to(fake_scores, 1.0)
}

/// `mean|x_rec − x| + mean|y_rec − y|`.
pub fn cycle_node<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    x_rec: NodeId,
    y: NodeId,
    y_rec: NodeId,
) -> Result<NodeId> {
    let a = g.mean_abs_diff(x_rec, x)?;
    let b = g.mean_abs_diff(y_rec, y)?;
    Ok(g.weighted_sum(&[(a, 1.0), (b, 1.0)])?)
}

/// `mean|G(i_V) − i_N| + mean|F(i_N) − i_V|`, batch item k of each generated
/// batch being compared with item k of its partner batch.
pub fn pixel_consistency_node<T: Scalar>(
    g: &mut Graph<T>,
    fake_nir: NodeId,
    paired_nir: NodeId,
    fake_vis: NodeId,
    paired_vis: NodeId,
) -> Result<NodeId> {
    check_pairing(g.value(fake_nir), g.value(paired_nir))?;
    check_pairing(g.value(fake_vis), g.value(paired_vis))?;
    let a = g.mean_abs_diff(fake_nir, paired_nir)?;
    let b = g.mean_abs_diff(fake_vis, paired_vis)?;
    Ok(g.weighted_sum(&[(a, 1.0), (b, 1.0)])?)
}

fn check_pairing<T: Scalar>(generated: &Tensor<T>, partner: &Tensor<T>) -> Result<()> {
    let (gn, pn) = (generated.shape().first(), partner.shape().first());
    if gn != pn {
        let (gn, pn) = (gn.copied().unwrap_or(0), pn.copied().unwrap_or(0));
        return Err(Error::Protocol(format!(
            "pixel consistency needs index-paired batches: {gn} generated vs {pn} partners, sample {} has no partner",
            gn.min(pn)
        )));
    }
    if generated.shape() != partner.shape() {
        return Err(Error::Shape(format!(
            "pixel consistency: {:?} vs {:?}",
            generated.shape(),
            partner.shape()
        )));
    }
    Ok(())
}

fn check_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_finite<T: Scalar>(op: &str, tensors: &[&Tensor<T>]) -> Result<()> {
    if tensors.iter().all(|t| t.all_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: non-finite input")))
    }
}

fn eval<T: Scalar>(
    inputs: &[&Tensor<T>],
    build: impl FnOnce(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok(g.scalar(out).as_f64())
}

pub fn lsgan_loss_discriminator<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<f64> {
    check_same_shape("lsgan_loss_discriminator", real, fake)?;
    check_finite("lsgan_loss_discriminator", &[real, fake])?;
    eval(&[real, fake], |g, ids| lsgan_discriminator_node(g, ids[0], ids[1]))
}

pub fn lsgan_loss_generator<T: Scalar>(fake: &Tensor<T>) -> Result<f64> {
    check_finite("lsgan_loss_generator", &[fake])?;
    eval(&[fake], |g, ids| Ok(lsgan_generator_node(g, ids[0])))
}

pub fn cycle_loss<T: Scalar>(
    x: &Tensor<T>,
    x_rec: &Tensor<T>,
    y: &Tensor<T>,
    y_rec: &Tensor<T>,
) -> Result<f64> {
    check_same_shape("cycle_loss", x, x_rec)?;
    check_same_shape("cycle_loss", y, y_rec)?;
    check_finite("cycle_loss", &[x, x_rec, y, y_rec])?;
    eval(&[x, x_rec, y, y_rec], |g, ids| cycle_node(g, ids[0], ids[1], ids[2], ids[3]))
}

pub fn pixel_consistency_loss<T: Scalar>(
    fake_nir: &Tensor<T>,
    paired_nir: &Tensor<T>,
    fake_vis: &Tensor<T>,
    paired_vis: &Tensor<T>,
) -> Result<f64> {
    check_finite("pixel_consistency_loss", &[fake_nir, paired_nir, fake_vis, paired_vis])?;
    eval(&[fake_nir, paired_nir, fake_vis, paired_vis], |g, ids| {
        pixel_consistency_node(g, ids[0], ids[1], ids[2], ids[3])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mismatched_or_non_finite_inputs() {
        let a = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros(vec![1, 1, 2, 3]);
        assert!(matches!(lsgan_loss_discriminator(&a, &b), Err(Error::Shape(_))));
        let nan = t(&[2], &[0.0, f64::NAN]);
        assert!(matches!(lsgan_loss_generator(&nan), Err(Error::Numeric(_))));
        assert!(matches!(cycle_loss(&a, &b, &a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn pixel_consistency_requires_partner_per_sample() {
        let two = Tensor::<f64>::zeros(vec![2, 3, 4, 4]);
        let one = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let err = pixel_consistency_loss(&two, &one, &two, &two).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        let wide = Tensor::<f64>::zeros(vec![2, 3, 4, 8]);
        assert!(matches!(
            pixel_consistency_loss(&two, &wide, &two, &two),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            lambda_cyc: -1.0,
            gamma_pc: 10.0,
        };
        assert!(matches!(
            total_objective(&ObjectiveTerms::default(), &w),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn record_reports_first_non_finite_field() {
        let mut r = LossRecord::default();
        assert_eq!(r.first_non_finite(), None);
        r.cyc = f64::INFINITY;
        assert_eq!(r.first_non_finite(), Some("cyc"));
    }
}
