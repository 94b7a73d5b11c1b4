//! Loss terms of the joint objective and of head fine-tuning.

use maprotonet_tensor::Var;
use serde::{Deserialize, Serialize};

use crate::affine::{affine_apply_var, AffineSpec};
use crate::error::{Error, Result};
use crate::network::{off_class_mask, ForwardVars, MaProtoNet, HEAD};
use crate::params::Session;

/// Coefficients of the joint objective and of the head L1 penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub clst: f64,
    pub sep: f64,
    pub mmap: f64,
    pub oc: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clst: 0.8,
            sep: 0.08,
            mmap: 0.5,
            oc: 0.05,
            l1: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            clst: 0.0,
            sep: 0.0,
            mmap: 0.0,
            oc: 0.0,
            l1: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.clst, self.sep, self.mmap, self.oc, self.l1];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// `cls + λ_clst·clst + λ_sep·sep + λ_mmap·mmap + λ_oc·oc`.
    pub fn combine(&self, cls: f64, clst: f64, sep: f64, mmap: f64, oc: f64) -> f64 {
        cls + self.clst * clst + self.sep * sep + self.mmap * mmap + self.oc * oc
    }
}

/// Mean cross-entropy of `(N, K)` logits.
pub fn loss_cls<'g>(logits: Var<'g>, y: &[usize]) -> Var<'g> {
    logits.cross_entropy(y)
}

/// Online-CAM loss: cross-entropy of the auxiliary logits.
pub fn loss_oc<'g>(cam_logits: Var<'g>, y: &[usize]) -> Var<'g> {
    cam_logits.cross_entropy(y)
}

fn class_masks(y: &[usize], class_of: &[usize], own: bool) -> Result<Vec<Vec<bool>>> {
    y.iter()
        .map(|&label| {
            let row: Vec<bool> = class_of.iter().map(|&c| (c == label) == own).collect();
            if row.iter().any(|&b| b) {
                Ok(row)
            } else {
                Err(Error::Config(format!(
                    "class {label} leaves no {} prototypes",
                    if own { "own-class" } else { "other-class" }
                )))
            }
        })
        .collect()
}

/// Batch mean of the smallest squared distance to a prototype of the true class.
pub fn loss_clst<'g>(distances: Var<'g>, y: &[usize], class_of: &[usize]) -> Result<Var<'g>> {
    Ok(distances.masked_row_min(&class_masks(y, class_of, true)?).mean_all())
}

/// Negated batch mean of the smallest squared distance to a prototype of
/// any other class; never positive.
pub fn loss_sep<'g>(distances: Var<'g>, y: &[usize], class_of: &[usize]) -> Result<Var<'g>> {
    Ok(distances
        .masked_row_min(&class_masks(y, class_of, false)?)
        .mean_all()
        .neg())
}

/// L1 norm of head weights linking prototypes to classes other than their own.
pub fn loss_l1<'a>(model: &MaProtoNet, sess: &Session<'a>) -> Var<'a> {
    sess.param(HEAD)
        .abs()
        .mul_const(&off_class_mask(&model.config))
        .sum_all()
}

/// `Σ_p ‖M(transformed)_p − A(reference)_p‖₁` summed over voxels and
/// averaged over the batch.
fn mapping_consistency<'a>(
    model: &MaProtoNet,
    sess: &Session<'a>,
    transformed_input: Var<'a>,
    reference_maps: Var<'a>,
    specs: &[AffineSpec],
) -> Var<'a> {
    let n = reference_maps.shape()[0] as f64;
    let lhs = model.mapping(sess, transformed_input);
    let rhs = affine_apply_var(reference_maps, specs);
    lhs.sub(rhs).abs().sum_all().mul_scalar(1.0 / n)
}

/// Single-scale mapping loss on the tensor `h` consumed by the mapping
/// module: `M(A(h))` against `A(M(h))`.
pub fn loss_map<'a>(model: &MaProtoNet, sess: &Session<'a>, h: Var<'a>, specs: &[AffineSpec]) -> Var<'a> {
    let reference = model.mapping(sess, h);
    mapping_consistency(model, sess, affine_apply_var(h, specs), reference, specs)
}

/// Multi-scale mapping loss: every pyramid level is transformed with the
/// same per-sample spec and re-fused before mapping.
pub fn loss_mmap<'a>(
    model: &MaProtoNet,
    sess: &Session<'a>,
    levels: &[Var<'a>],
    specs: &[AffineSpec],
) -> Result<Var<'a>> {
    let h_mul = model.fuse(sess, levels)?;
    let reference = model.mapping(sess, h_mul);
    let moved: Vec<Var<'a>> = levels.iter().map(|&h| affine_apply_var(h, specs)).collect();
    let fused = model.fuse(sess, &moved)?;
    Ok(mapping_consistency(model, sess, fused, reference, specs))
}

/// Components of the joint objective for one batch.
pub struct JointLoss<'a> {
    pub cls: Var<'a>,
    pub clst: Var<'a>,
    pub sep: Var<'a>,
    /// Multi-scale or single-scale mapping loss, depending on configuration.
    pub mapping: Var<'a>,
    pub oc: Var<'a>,
    pub total: Var<'a>,
}

/// Scalar values of a [`JointLoss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub clst: f64,
    pub sep: f64,
    pub mapping: f64,
    pub oc: f64,
}

impl JointLoss<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            total: self.total.item(),
            cls: self.cls.item(),
            clst: self.clst.item(),
            sep: self.sep.item(),
            mapping: self.mapping.item(),
            oc: self.oc.item(),
        }
    }
}

/// Weighted sum of the joint terms. The head L1 penalty is not part of it.
pub fn total_loss<'a>(
    cls: Var<'a>,
    clst: Var<'a>,
    sep: Var<'a>,
    mapping: Var<'a>,
    oc: Var<'a>,
    w: &LossWeights,
) -> Var<'a> {
    cls.add(clst.mul_scalar(w.clst))
        .add(sep.mul_scalar(w.sep))
        .add(mapping.mul_scalar(w.mmap))
        .add(oc.mul_scalar(w.oc))
}

/// Builds every joint term from recorded forward intermediates. With
/// `use_mmap` the multi-scale mapping loss is used, otherwise the
/// single-scale mapping loss on the fused tensor.
pub fn joint_loss<'a>(
    model: &MaProtoNet,
    sess: &Session<'a>,
    fv: &ForwardVars<'a>,
    y: &[usize],
    specs: &[AffineSpec],
    weights: &LossWeights,
    use_mmap: bool,
) -> Result<JointLoss<'a>> {
    let class_of = model.bank().class_of;
    let cls = loss_cls(fv.logits, y);
    let clst = loss_clst(fv.distances, y, &class_of)?;
    let sep = loss_sep(fv.distances, y, &class_of)?;
    let mapping = if use_mmap {
        let moved: Vec<Var<'a>> = fv.levels.iter().map(|&h| affine_apply_var(h, specs)).collect();
        let fused = model.fuse(sess, &moved)?;
        mapping_consistency(model, sess, fused, fv.raw_maps, specs)
    } else {
        mapping_consistency(model, sess, affine_apply_var(fv.h_mul, specs), fv.raw_maps, specs)
    };
    let oc = loss_oc(fv.cam_logits, y);
    let total = total_loss(cls, clst, sep, mapping, oc, weights);
    Ok(JointLoss {
        cls,
        clst,
        sep,
        mapping,
        oc,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use maprotonet_tensor::{Array, Graph};
    use ndarray::IxDyn;

    #[test]
    fn weighted_sum_arithmetic() {
        let w = LossWeights::default();
        assert!((w.combine(1.0, 2.0, 3.0, 4.0, 5.0) - 5.09).abs() < 1e-12);
        assert_eq!(LossWeights::zero().combine(1.0, 2.0, 3.0, 4.0, 5.0), 1.0);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let g = Graph::new();
        let logits = g.constant(Array::zeros(IxDyn(&[3, 2])));
        assert!((loss_cls(logits, &[0, 1, 1]).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cluster_and_separation_on_constant_distances() {
        let g = Graph::new();
        let class_of = [0, 0, 1, 1];
        let mut d = Array::from_elem(IxDyn(&[2, 4]), 4.0);
        d[[0, 1]] = 0.0;
        let dv = g.constant(d);
        let clst = loss_clst(dv, &[0, 1], &class_of).unwrap().item();
        assert!((clst - 2.0).abs() < 1e-15);
        let sep = loss_sep(dv, &[0, 1], &class_of).unwrap().item();
        assert!((sep + 4.0).abs() < 1e-15);
        assert!(loss_clst(dv, &[0, 1], &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights {
            sep: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
