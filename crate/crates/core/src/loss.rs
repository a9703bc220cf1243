//! Segmentation loss: binary cross-entropy plus soft Jaccard distance.

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Probability clamp used inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;
/// Added to both sides of each per-class Jaccard ratio so that a class
/// absent from target and prediction scores 1 instead of 0/0.
pub const JACCARD_SMOOTH: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct LossTerms<T: Element = f32> {
    pub total: Tensor<T>,
    pub bce: Tensor<T>,
    pub jaccard: Tensor<T>,
}

/// Mean binary cross-entropy over every element, probabilities clamped.
pub fn bce<T: Element>(target: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    check(target, probs)?;
    let p = probs.clamp(T::cast(PROB_CLAMP), T::cast(1.0 - PROB_CLAMP));
    let one_minus_y = target.neg().add_scalar(T::one());
    let pos = target.mul(&p.ln())?;
    let neg = one_minus_y.mul(&p.neg().add_scalar(T::one()).ln())?;
    Ok(pos.add(&neg)?.mean().neg())
}

/// Soft Jaccard index per class (axis 1), averaged over classes.
pub fn soft_jaccard<T: Element>(target: &Tensor<T>, probs: &Tensor<T>) -> Result<Tensor<T>> {
    check(target, probs)?;
    let inter = target.mul(probs)?;
    let union = target.add(probs)?.sub(&inter)?;
    let eps = T::cast(JACCARD_SMOOTH);
    let per_class = inter
        .sum_except(1)?
        .add_scalar(eps)
        .div(&union.sum_except(1)?.add_scalar(eps))?;
    Ok(per_class.mean())
}

/// `BCE + (1 − J)` for one-hot targets and softmax probabilities, both
/// `[B, C, H, W]`.
pub fn segmentation_loss<T: Element>(target: &Tensor<T>, probs: &Tensor<T>) -> Result<LossTerms<T>> {
    let bce = bce(target, probs)?;
    let jaccard = soft_jaccard(target, probs)?;
    let total = bce.add(&jaccard.neg().add_scalar(T::one()))?;
    Ok(LossTerms { total, bce, jaccard })
}

fn check<T: Element>(target: &Tensor<T>, probs: &Tensor<T>) -> Result<()> {
    if target.shape() != probs.shape() || target.rank() != 4 {
        return Err(shape_err!(
            "loss: target {:?} and prediction {:?} must be equal [B, C, H, W]",
            target.shape(),
            probs.shape()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(&data, shape).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let y = t(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[1, 3, 2, 2]);
        let l = segmentation_loss(&y, &y).unwrap();
        assert!(l.total.item() <= 3e-6 && l.total.item() >= 0.0, "{}", l.total.item());
        assert!((l.jaccard.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_prediction_bce() {
        let y = t(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[1, 3, 2, 2]);
        let p = Tensor::full(&[1, 3, 2, 2], 1.0 / 3.0);
        let expect = -((1.0f64 / 3.0).ln() + 2.0 * (2.0f64 / 3.0).ln()) / 3.0;
        assert!((bce(&y, &p).unwrap().item() - expect).abs() < 1e-12);
        assert!((expect - 0.6365).abs() < 1e-4);
    }

    #[test]
    fn channel_swap_symmetry() {
        let y = t(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[1, 3, 2, 2]);
        let p = t(vec![0.6, 0.2, 0.1, 0.5, 0.3, 0.3, 0.2, 0.1, 0.1, 0.5, 0.7, 0.4], &[1, 3, 2, 2]);
        let swap = |x: &Tensor<f64>| {
            let v = x.to_vec();
            t([&v[4..8], &v[0..4], &v[8..12]].concat(), &[1, 3, 2, 2])
        };
        let a = segmentation_loss(&y, &p).unwrap().total.item();
        let b = segmentation_loss(&swap(&y), &swap(&p)).unwrap().total.item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let y = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(segmentation_loss(&y, &Tensor::zeros(&[1, 3, 2, 1])).is_err());
    }
}
