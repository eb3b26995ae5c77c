//! Pixel reconstruction, feature regression and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{DamaError, Result};
use crate::mask::Mask;
use crate::tensor::{Element, Graph, Tensor};

/// Per-step loss values; `L_total = L_p1 + L_p2 + α·L_f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pixel_1: f64,
    pub pixel_2: f64,
    pub feature: f64,
    pub total: f64,
    /// Branch-1 per-patch losses, `batch·N`, zero at visible patches.
    pub patch_losses_1: Vec<f32>,
}

pub struct PixelLoss {
    /// Mean of the per-patch losses over masked patches, `[1]`.
    pub scalar: Tensor,
    /// Per-patch mean squared error, zero at visible patches. Detached.
    pub per_patch: Vec<f32>,
}

/// Masked mean-squared reconstruction error.
///
/// `pred` is `[batch·N, D]`, `target` holds the same number of values and
/// `masks[b]` says which of sample `b`'s N patches count.
pub fn pixel_loss<T: Element>(g: &mut Graph<T>, pred: Tensor, target: &[f32], masks: &[Mask]) -> Result<PixelLoss> {
    let shape = g.shape(pred).to_vec();
    let rows: usize = masks.iter().map(Mask::len).sum();
    if shape.len() != 2 || shape[0] != rows || target.len() != rows * shape[1] {
        return Err(DamaError::Shape(format!(
            "prediction {shape:?} vs {} target values over {rows} patches",
            target.len()
        )));
    }
    let weights: Vec<T> =
        masks.iter().flat_map(|m| m.bits().iter().map(|&b| if b == 1 { T::one() } else { T::zero() })).collect();
    let masked: usize = masks.iter().map(Mask::masked_count).sum();
    if masked == 0 {
        return Err(DamaError::Contract("pixel loss over zero masked patches".into()));
    }
    let target = g.constant_f32(target, &shape)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let per = g.mean_over_axis(sq, 1)?;
    let w = g.constant(weights, &[rows])?;
    let kept = g.mul(per, w)?;
    let per_patch = g.value(kept).iter().map(|v| v.as_f32()).collect();
    let total = g.sum(kept);
    let scalar = g.scale(total, 1.0 / masked as f64);
    Ok(PixelLoss { scalar, per_patch })
}

/// Elementwise smooth-L1 between `pred` and a fixed `target`, averaged
/// over every entry.
pub fn smooth_l1<T: Element>(g: &mut Graph<T>, pred: Tensor, target: &[T], beta: f64) -> Result<Tensor> {
    if !(beta > 0.0) {
        return Err(DamaError::Config(format!("smooth-L1 beta must be positive, got {beta}")));
    }
    let shape = g.shape(pred).to_vec();
    let target = g.constant(target.to_vec(), &shape)?;
    let diff = g.sub(pred, target)?;
    let l = g.smooth_l1(diff, beta)?;
    Ok(g.mean(l))
}

/// Closed-form smooth-L1 of one difference.
pub fn smooth_l1_value(diff: f64, beta: f64) -> f64 {
    if diff.abs() <= beta {
        0.5 * diff * diff / beta
    } else {
        diff.abs() - 0.5 * beta
    }
}

/// `pixel_1 + pixel_2 + alpha·feature` in the graph.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    pixel_1: Tensor,
    pixel_2: Tensor,
    feature: Tensor,
    alpha: f64,
) -> Result<Tensor> {
    let p = g.add(pixel_1, pixel_2)?;
    let f = g.scale(feature, alpha);
    Ok(g.add(p, f)?)
}

/// Value-level combination that refuses non-finite inputs.
pub fn combine(pixel_1: f64, pixel_2: f64, feature: f64, alpha: f64, step: u64) -> Result<f64> {
    for (what, v) in [("L_p1", pixel_1), ("L_p2", pixel_2), ("L_f", feature), ("alpha", alpha)] {
        if !v.is_finite() {
            return Err(DamaError::Numeric { step, what: what.into() });
        }
    }
    Ok(pixel_1 + pixel_2 + alpha * feature)
}
