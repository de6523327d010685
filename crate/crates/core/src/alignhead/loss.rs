use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{kl_divergence, Dims, Point, SegMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Kl,
    L1Point,
}

#[derive(Debug, Clone, Copy)]
pub enum LossTarget<'a> {
    Map(&'a SegMap),
    /// A coordinate together with the image it lives in.
    Point(Point, Dims),
}

/// `|Δx| / W + |Δy| / H`: L1 distance on coordinates normalized to `[0, 1]`.
pub fn l1_point_loss(pred: Point, gold: Point, dims: Dims) -> f64 {
    (pred.x - gold.x).abs() / dims.w as f64 + (pred.y - gold.y).abs() / dims.h as f64
}

pub fn losses(pred: LossTarget<'_>, gold: LossTarget<'_>, kind: LossKind) -> Result<f64> {
    match (kind, pred, gold) {
        (LossKind::Kl, LossTarget::Map(p), LossTarget::Map(g)) => kl_divergence(g, p),
        (LossKind::L1Point, LossTarget::Point(p, pd), LossTarget::Point(g, gd)) => {
            if pd != gd {
                return Err(Error::DimMismatch(format!(
                    "points in {}x{} and {}x{} images",
                    pd.h, pd.w, gd.h, gd.w
                )));
            }
            Ok(l1_point_loss(p, g, gd))
        }
        (kind, _, _) => Err(Error::Parameter(format!("{kind:?} loss needs matching target kinds"))),
    }
}

/// Relative weights of the task and grounding terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub task: f64,
    pub grounding: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            task: 0.5,
            grounding: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(task: f64, grounding: f64) -> Result<Self> {
        let w = LossWeights { task, grounding };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.task >= 0.0 && self.grounding >= 0.0) || !self.task.is_finite() || !self.grounding.is_finite() {
            return Err(Error::Parameter(format!(
                "loss weights must be non-negative, got {} / {}",
                self.task, self.grounding
            )));
        }
        if self.task == 0.0 && self.grounding == 0.0 {
            return Err(Error::Parameter("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

/// `α_task · task + α_grounding · mean(grounding)`; an empty grounding list
/// contributes nothing.
pub fn finetune_loss(task_loss: f64, grounding_losses: &[f64], w: LossWeights) -> Result<f64> {
    w.validate()?;
    let g = if grounding_losses.is_empty() {
        0.0
    } else {
        grounding_losses.iter().sum::<f64>() / grounding_losses.len() as f64
    };
    Ok(w.task * task_loss + w.grounding * g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{gold_map_from_region, BoundingBox, Region};

    #[test]
    fn point_loss_examples() {
        let d = Dims::new(50, 100);
        let p = Point::new(3.0, 4.0);
        assert_eq!(l1_point_loss(p, p, d), 0.0);
        assert_eq!(l1_point_loss(Point::new(0.0, 0.0), Point::new(100.0, 50.0), d), 2.0);
        let v = losses(LossTarget::Point(p, d), LossTarget::Point(Point::new(13.0, 9.0), d), LossKind::L1Point).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
        assert!(losses(LossTarget::Point(p, d), LossTarget::Point(p, Dims::new(1, 1)), LossKind::L1Point).is_err());
    }

    #[test]
    fn kl_matches_geometry_and_rejects_mixed_kinds() {
        let d = Dims::new(2, 2);
        let gold = gold_map_from_region(&Region::single(BoundingBox::new(0, 0, 1, 1).unwrap(), d).unwrap()).unwrap();
        let pred = SegMap::uniform(d);
        let v = losses(LossTarget::Map(&pred), LossTarget::Map(&gold), LossKind::Kl).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let p = LossTarget::Point(Point::new(0.0, 0.0), d);
        assert!(losses(p, LossTarget::Map(&gold), LossKind::Kl).is_err());
        assert!(losses(LossTarget::Map(&pred), LossTarget::Map(&gold), LossKind::L1Point).is_err());
    }

    #[test]
    fn finetune_examples() {
        let w = LossWeights::default();
        assert_eq!(finetune_loss(2.0, &[4.0], w).unwrap(), 3.0);
        assert_eq!(finetune_loss(2.0, &[], w).unwrap(), 1.0);
        let pure = LossWeights::new(1.0, 0.0).unwrap();
        assert_eq!(finetune_loss(2.0, &[100.0, 7.0], pure).unwrap(), 2.0);
        assert!(LossWeights::new(-0.1, 0.5).is_err());
        assert!(LossWeights::new(0.0, 0.0).is_err());
        let bad = LossWeights { task: -1.0, grounding: 1.0 };
        assert!(finetune_loss(1.0, &[], bad).is_err());
    }
}
