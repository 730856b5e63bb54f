//! Contrastive attention-guidance losses and the total training objective.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};

pub const TRIPLET_MARGIN: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 0.1;
const DIST_EPS: f64 = 1e-12;

/// Loss values of one step. `l_cl` and `total` are derived from the
/// components so the identities hold exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_tri: f64,
    pub l_am: f64,
    pub l_focus: f64,
    pub l_cl: f64,
    pub l_ce: f64,
    pub total: f64,
    pub alpha: f64,
}

impl LossBundle {
    pub fn new(l_ce: f64, l_tri: f64, l_am: f64, l_focus: f64, alpha: f64) -> Self {
        let l_cl = l_tri + l_am + l_focus;
        Self {
            l_tri,
            l_am,
            l_focus,
            l_cl,
            l_ce,
            total: l_ce + alpha * l_cl,
            alpha,
        }
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err!("vector lengths {} and {} differ", a.len(), b.len()));
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Triplet loss on plain vectors with anchor `f_aug`, positive `f_orig` and
/// negative `f_masked`.
pub fn triplet(f_aug: &[f64], f_orig: &[f64], f_masked: &[f64], margin: f64) -> Result<f64> {
    check_dims(f_aug, f_orig)?;
    check_dims(f_aug, f_masked)?;
    if margin < 0.0 {
        return Err(param_err!("margin must be non-negative"));
    }
    Ok((dist(f_aug, f_orig) - dist(f_aug, f_masked) + margin).max(0.0))
}

pub fn attention_mining(score_masked: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&score_masked) {
        return Err(param_err!("score {score_masked} outside [0, 1]"));
    }
    Ok(score_masked)
}

pub fn focus(mask: &[f64]) -> Result<f64> {
    if mask.is_empty() {
        return Err(param_err!("empty mask"));
    }
    Ok(mask.iter().sum::<f64>() / mask.len() as f64)
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + DIST_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

fn pair_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    // The epsilon keeps the gradient finite at zero distance and cancels
    // between the two distances when both are zero.
    Ok(((a - b)?.sqr()?.sum(D::Minus1)? + DIST_EPS)?.sqrt()?)
}

/// Batched triplet loss over `(B, d)` embeddings, averaged over the batch.
pub fn triplet_loss(anchor: &Tensor, positive: &Tensor, negative: &Tensor, margin: f64) -> Result<Tensor> {
    if anchor.dims() != positive.dims() || anchor.dims() != negative.dims() {
        return Err(shape_err!(
            "triplet shapes {:?}, {:?}, {:?} differ",
            anchor.dims(),
            positive.dims(),
            negative.dims()
        ));
    }
    let d = (pair_dist(anchor, positive)? - pair_dist(anchor, negative)?)?;
    Ok((d + margin)?.relu()?.mean_all()?)
}

/// Mean cross-entropy of `(B, C)` logits against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(shape_err!("{} labels for a batch of {b}", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(param_err!("label {bad} outside 0..{c}"));
    }
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let idx = Tensor::new(labels, logits.device())?.unsqueeze(1)?;
    Ok(logp.gather(&idx, 1)?.neg()?.mean_all()?)
}

/// Differentiable loss terms of one step.
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub ce: Tensor,
    pub tri: Tensor,
    pub am: Tensor,
    pub focus: Tensor,
    pub total: Tensor,
    pub alpha: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossTensors {
    pub fn bundle(&self) -> Result<LossBundle> {
        Ok(LossBundle::new(
            scalar(&self.ce)?,
            scalar(&self.tri)?,
            scalar(&self.am)?,
            scalar(&self.focus)?,
            self.alpha,
        ))
    }
}

/// `CE(logits_aug, labels) + alpha * (l_tri + l_am + l_focus)`.
pub fn total_loss(
    logits_aug: &Tensor,
    labels: &[u32],
    l_tri: &Tensor,
    l_am: &Tensor,
    l_focus: &Tensor,
    alpha: f64,
) -> Result<LossTensors> {
    let ce = cross_entropy(logits_aug, labels)?;
    let cl = ((l_tri + l_am)? + l_focus)?;
    let total = if alpha == 0.0 { ce.clone() } else { (&ce + (cl * alpha)?)? };
    Ok(LossTensors {
        ce,
        tri: l_tri.clone(),
        am: l_am.clone(),
        focus: l_focus.clone(),
        total,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet(&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(triplet(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert_eq!(triplet(&[0.0, 0.0], &[3.0, 0.0], &[0.0, 1.0], 1.0).unwrap(), 3.0);
        assert!(triplet(&[0.0], &[0.0, 1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn batched_triplet_matches_scalar() {
        let a = Tensor::new(&[[0.0f64, 0.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        let p = Tensor::new(&[[3.0f64, 0.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        let n = Tensor::new(&[[0.0f64, 1.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        let got = triplet_loss(&a, &p, &n, 1.0).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - 2.0).abs() < 1e-9);
        let same = triplet_loss(&a, &a, &a, 1.0).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(same, 1.0);
    }

    #[test]
    fn mining_and_focus() {
        for s in [0.0, 1.0, 0.4] {
            assert_eq!(attention_mining(s).unwrap(), s);
        }
        assert!(attention_mining(1.5).is_err());
        assert_eq!(focus(&[0.25; 16]).unwrap(), 0.25);
        assert_eq!(focus(&[0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(focus(&[]).is_err());
    }

    #[test]
    fn bundle_identities() {
        let b = LossBundle::new(0.7, 0.2, 0.1, 0.3, 0.1);
        assert_eq!(b.l_cl, 0.2 + 0.1 + 0.3);
        assert!((b.l_cl - 0.6).abs() < 1e-15);
        assert!((b.total - 0.76).abs() < 1e-15);
        assert_eq!(b.total, b.l_ce + b.alpha * b.l_cl);
    }

    #[test]
    fn cross_entropy_closed_form() {
        let logits = Tensor::new(&[[0.0f64, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        for labels in [[0u32, 1], [1, 1]] {
            let ce = cross_entropy(&logits, &labels).unwrap().to_scalar::<f64>().unwrap();
            assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let big = Tensor::new(&[[1000.0f64, 0.0]], &Device::Cpu).unwrap();
        let ce = cross_entropy(&big, &[1]).unwrap().to_scalar::<f64>().unwrap();
        assert!((ce - 1000.0).abs() < 1e-9);
        assert!(cross_entropy(&logits, &[2, 0]).is_err());
        assert!(cross_entropy(&logits, &[0]).is_err());
    }

    #[test]
    fn total_without_contrastive_terms_is_ce() {
        let logits = Tensor::new(&[[0.3f64, -0.1]], &Device::Cpu).unwrap();
        let one = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let t = total_loss(&logits, &[1], &one, &one, &one, 0.0).unwrap();
        let b = t.bundle().unwrap();
        assert_eq!(b.total, b.l_ce);
        assert_eq!(t.total.to_scalar::<f64>().unwrap(), b.l_ce);
    }

    proptest! {
        #[test]
        fn components_are_non_negative(
            v in proptest::collection::vec(-5.0f64..5.0, 6),
            m in proptest::collection::vec(0.0f64..1.0, 1..64),
            s in 0.0f64..=1.0,
        ) {
            prop_assert!(triplet(&v[0..2], &v[2..4], &v[4..6], 1.0).unwrap() >= 0.0);
            prop_assert!(attention_mining(s).unwrap() >= 0.0);
            prop_assert!(focus(&m).unwrap() >= 0.0);
            let logits = Tensor::new(&[[v[0], v[1]]], &Device::Cpu).unwrap();
            prop_assert!(cross_entropy(&logits, &[1]).unwrap().to_scalar::<f64>().unwrap() >= 0.0);
        }

        #[test]
        fn focus_matches_summation_oracle(m in proptest::collection::vec(0.0f64..1.0, 64)) {
            let mut acc = 0.0;
            for row in m.chunks(8) {
                for v in row {
                    acc += v;
                }
            }
            prop_assert!((focus(&m).unwrap() - acc / 64.0).abs() < 1e-12);
        }
    }
}
