//! Class-adaptive loss: masked binary cross-entropy plus batch-joint Dice.
//!
//! A `(sample, class)` pair whose dataset does not annotate the class is
//! masked: it adds nothing to either term and receives zero gradient.
//! Dice overlap sums are pooled over every unmasked sample of the batch
//! before the ratio is formed, so a class that covers a few pixels in one
//! image and many in another is scored as one region.

use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::label_space::SampleTarget;
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            bce_weight: 1.0,
            dice_weight: 1.0,
            epsilon: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bce_weight >= 0.0 && self.dice_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.bce_weight == 0.0 && self.dice_weight == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("dice epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Targets for a batch: `[B, C, H, W]` one-hot plus a `B x C` annotation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub onehot: Tensor,
    pub mask: Vec<bool>,
}

impl TargetBatch {
    pub fn new(onehot: Tensor, mask: Vec<bool>) -> Result<Self> {
        let [b, c, _, _] = onehot.dims4()?;
        if mask.len() != b * c {
            return Err(Error::shape(format!("mask has {} entries, expected {}", mask.len(), b * c)));
        }
        Ok(TargetBatch { onehot, mask })
    }

    pub fn from_samples(samples: &[&SampleTarget]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::shape("empty target batch"))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.onehot.shape());
        let mut data = Vec::with_capacity(first.onehot.numel() * samples.len());
        let mut mask = Vec::with_capacity(first.mask.len() * samples.len());
        for s in samples {
            if s.onehot.shape() != first.onehot.shape() || s.mask.len() != first.mask.len() {
                return Err(Error::shape("targets in a batch must share a shape"));
            }
            data.extend_from_slice(s.onehot.data());
            mask.extend_from_slice(&s.mask);
        }
        Self::new(Tensor::new(shape, data)?, mask)
    }

    fn check_pred(&self, pred: &Tensor) -> Result<[usize; 4]> {
        let dims = pred.dims4()?;
        if pred.shape() != self.onehot.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} does not match target {:?}",
                pred.shape(),
                self.onehot.shape()
            )));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(Error::DegenerateLoss);
        }
        Ok(dims)
    }
}

/// Per-class pieces of the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTerms {
    /// Number of unmasked samples for this class.
    pub samples: usize,
    /// Summed (not averaged) BCE over the class's unmasked pixels.
    pub bce_sum: f64,
    pub intersection: f64,
    pub pred_sum: f64,
    pub target_sum: f64,
    /// Dice coefficient, `None` when no sample annotates the class.
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice_loss: f64,
    pub total: f64,
    pub per_class: Vec<ClassTerms>,
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    -(y / p - (1.0 - y) / (1.0 - p))
}

/// Value of every term of the loss.
pub fn breakdown(pred: &Tensor, targets: &TargetBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let [b, c, h, w] = targets.check_pred(pred)?;
    let plane = h * w;
    let (p, y) = (pred.data(), targets.onehot.data());
    let mut per_class = Vec::with_capacity(c);
    let mut bce_total = 0.0;
    let mut pairs = 0usize;
    for ci in 0..c {
        let mut t = ClassTerms {
            samples: 0,
            bce_sum: 0.0,
            intersection: 0.0,
            pred_sum: 0.0,
            target_sum: 0.0,
            dice: None,
        };
        for bi in 0..b {
            if !targets.mask[bi * c + ci] {
                continue;
            }
            t.samples += 1;
            let off = (bi * c + ci) * plane;
            for (&pv, &yv) in p[off..][..plane].iter().zip(&y[off..][..plane]) {
                t.bce_sum += bce_term(pv, yv);
                t.intersection += pv * yv;
                t.pred_sum += pv;
                t.target_sum += yv;
            }
        }
        if t.samples > 0 {
            t.dice = Some((2.0 * t.intersection + cfg.epsilon) / (t.pred_sum + t.target_sum + cfg.epsilon));
            bce_total += t.bce_sum;
            pairs += t.samples;
        }
        per_class.push(t);
    }
    let bce = bce_total / (pairs * plane) as f64;
    let dices: Vec<f64> = per_class.iter().filter_map(|t| t.dice).collect();
    let dice_loss = 1.0 - dices.iter().sum::<f64>() / dices.len() as f64;
    Ok(LossBreakdown {
        bce,
        dice_loss,
        total: cfg.bce_weight * bce + cfg.dice_weight * dice_loss,
        per_class,
    })
}

pub fn masked_bce(pred: &Tensor, targets: &TargetBatch) -> Result<f64> {
    Ok(breakdown(pred, targets, &LossConfig::default())?.bce)
}

pub fn joint_dice_loss(pred: &Tensor, targets: &TargetBatch, epsilon: f64) -> Result<f64> {
    let cfg = LossConfig {
        epsilon,
        ..LossConfig::default()
    };
    Ok(breakdown(pred, targets, &cfg)?.dice_loss)
}

pub fn total_loss(pred: &Tensor, targets: &TargetBatch, cfg: &LossConfig) -> Result<f64> {
    Ok(breakdown(pred, targets, cfg)?.total)
}

/// Loss value and its gradient with respect to the predictions.
pub fn total_loss_with_grad(pred: &Tensor, targets: &TargetBatch, cfg: &LossConfig) -> Result<(f64, Tensor)> {
    let bd = breakdown(pred, targets, cfg)?;
    let [b, c, h, w] = pred.dims4()?;
    let plane = h * w;
    let pairs: usize = bd.per_class.iter().map(|t| t.samples).sum();
    let active = bd.per_class.iter().filter(|t| t.dice.is_some()).count();
    let bce_scale = cfg.bce_weight / (pairs * plane) as f64;
    let dice_scale = cfg.dice_weight / active as f64;
    let (p, y) = (pred.data(), targets.onehot.data());
    let mut grad = vec![0.0; p.len()];
    for (ci, t) in bd.per_class.iter().enumerate() {
        if t.dice.is_none() {
            continue;
        }
        let num = 2.0 * t.intersection + cfg.epsilon;
        let den = t.pred_sum + t.target_sum + cfg.epsilon;
        for bi in 0..b {
            if !targets.mask[bi * c + ci] {
                continue;
            }
            let off = (bi * c + ci) * plane;
            for i in off..off + plane {
                let d_dice = (2.0 * y[i] * den - num) / (den * den);
                grad[i] = bce_scale * bce_grad(p[i], y[i]) - dice_scale * d_dice;
            }
        }
    }
    Ok((bd.total, Tensor::new(pred.shape().to_vec(), grad)?))
}

struct LossRule {
    grad: Tensor,
}

impl BackwardRule for LossRule {
    fn name(&self) -> &str {
        "total_loss"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(self.grad.scale(grad_out.data()[0]))])
    }
}

/// Record the total loss of `pred` on the tape as a scalar node.
pub fn total_loss_on_tape(tape: &mut Tape, pred: Var, targets: &TargetBatch, cfg: &LossConfig) -> Result<Var> {
    let (value, grad) = total_loss_with_grad(tape.value(pred), targets, cfg)?;
    tape.custom(&[pred], Tensor::scalar(value), Box::new(LossRule { grad }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(y: &[f64], shape: [usize; 4], mask: Vec<bool>) -> TargetBatch {
        TargetBatch::new(Tensor::new(shape.to_vec(), y.to_vec()).unwrap(), mask).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let y = [1.0, 0.0, 0.0, 1.0];
        let t = batch(&y, [1, 1, 2, 2], vec![true]);
        let p = Tensor::new(vec![1, 1, 2, 2], y.to_vec()).unwrap();
        assert!(masked_bce(&p, &t).unwrap() < 1e-10);
        assert!(joint_dice_loss(&p, &t, 1e-5).unwrap() < 1e-12);
    }

    #[test]
    fn half_everywhere_is_ln2() {
        let t = batch(&[1.0, 0.0, 0.0, 1.0], [1, 1, 2, 2], vec![true]);
        let p = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!((masked_bce(&p, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn disjoint_prediction() {
        let y = [1.0, 0.0, 0.0, 1.0];
        let t = batch(&y, [1, 1, 2, 2], vec![true]);
        let p = Tensor::new(vec![1, 1, 2, 2], y.iter().map(|v| 1.0 - v).collect()).unwrap();
        // D = eps / (4 + eps)
        let eps = 1e-5;
        let expect = 1.0 - eps / (4.0 + eps);
        assert!((joint_dice_loss(&p, &t, eps).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_is_degenerate() {
        let t = batch(&[0.0; 4], [1, 1, 2, 2], vec![false]);
        let p = Tensor::full(&[1, 1, 2, 2], 0.3);
        assert!(matches!(masked_bce(&p, &t), Err(Error::DegenerateLoss)));
    }

    #[test]
    fn weight_projections() {
        let t = batch(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0], [1, 2, 2, 2], vec![true, true]);
        let p = Tensor::new(vec![1, 2, 2, 2], vec![0.9, 0.2, 0.6, 0.7, 0.1, 0.4, 0.8, 0.3]).unwrap();
        let only_bce = LossConfig { bce_weight: 1.0, dice_weight: 0.0, ..Default::default() };
        let only_dice = LossConfig { bce_weight: 0.0, dice_weight: 1.0, ..Default::default() };
        assert_eq!(total_loss(&p, &t, &only_bce).unwrap(), masked_bce(&p, &t).unwrap());
        assert_eq!(total_loss(&p, &t, &only_dice).unwrap(), joint_dice_loss(&p, &t, 1e-5).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { bce_weight: 0.0, dice_weight: 0.0, epsilon: 1e-5 }.validate().is_err());
        assert!(LossConfig { bce_weight: -1.0, dice_weight: 1.0, epsilon: 1e-5 }.validate().is_err());
        assert!(LossConfig { bce_weight: 1.0, dice_weight: 1.0, epsilon: 0.0 }.validate().is_err());
    }
}
