//! Pixel supervision: binary cross-entropy, soft Dice and mean absolute
//! error, summed into a segmentation loss, plus an auxiliary term of the
//! same form on every coarse reference mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse_context::CoarseMask;
use crate::tensor::{avg_pool2d, Tensor};

/// Clamp applied to predictions before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing in numerator and denominator of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Weight of the auxiliary coarse-mask loss.
pub const DEFAULT_LAMBDA_AUX: f64 = 0.3;

fn check_extents(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and ground truth {:?} differ in extent",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_extents(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `1 − (2·Σpg + s)/(Σp + Σg + s)` with `s = 1`.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_extents(pred, gt)?;
    let (inter, sp, sg) = dice_sums(pred, gt);
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH))
}

fn dice_sums(pred: &Tensor, gt: &Tensor) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    (inter, sp, sg)
}

pub fn mae_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_extents(pred, gt)?;
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// `bce + dice + mae` on one prediction.
pub fn combined_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(bce_loss(pred, gt)? + dice_loss(pred, gt)? + mae_loss(pred, gt)?)
}

/// How the auxiliary losses of several reference masks are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub bce: f64,
    pub dice: f64,
    pub mae: f64,
    /// `bce + dice + mae` on the full-resolution prediction.
    pub seg: f64,
    /// Reduced `bce + dice + mae` over the coarse masks.
    pub aux: f64,
    pub total: f64,
    pub lambda_aux: f64,
}

impl LossReport {
    pub fn compose(bce: f64, dice: f64, mae: f64, aux: f64, lambda_aux: f64) -> Self {
        let seg = bce + dice + mae;
        Self {
            bce,
            dice,
            mae,
            seg,
            aux,
            total: seg + lambda_aux * aux,
            lambda_aux,
        }
    }
}

/// Down-samples a binary ground truth to a `rows×cols` coarse grid by
/// average pooling and thresholding at 0.5.
pub fn coarse_ground_truth(gt: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let (h, w) = gt.dims2()?;
    if rows == 0 || cols == 0 {
        return Err(Error::dim("coarse grid must be non-empty"));
    }
    let k = h.div_ceil(rows);
    if h.div_ceil(k) != rows || w.div_ceil(k) != cols {
        return Err(Error::dim(format!(
            "no square pooling window maps {h}×{w} onto {rows}×{cols}"
        )));
    }
    let pooled = avg_pool2d(&gt.clone().reshape(&[1, h, w])?, k)?;
    pooled
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .reshape(&[rows, cols])
}

pub fn total_loss(
    pred: &Tensor,
    gt: &Tensor,
    coarse_masks: &[CoarseMask],
    coarse_gts: &[Tensor],
    lambda_aux: f64,
) -> Result<LossReport> {
    total_loss_with(pred, gt, coarse_masks, coarse_gts, lambda_aux, AuxReduction::Mean)
}

pub fn total_loss_with(
    pred: &Tensor,
    gt: &Tensor,
    coarse_masks: &[CoarseMask],
    coarse_gts: &[Tensor],
    lambda_aux: f64,
    reduction: AuxReduction,
) -> Result<LossReport> {
    if coarse_masks.len() != coarse_gts.len() {
        return Err(Error::dim(format!(
            "{} coarse masks but {} coarse ground truths",
            coarse_masks.len(),
            coarse_gts.len()
        )));
    }
    let bce = bce_loss(pred, gt)?;
    let dice = dice_loss(pred, gt)?;
    let mae = mae_loss(pred, gt)?;

    let mut aux = 0.0;
    for (mask, cgt) in coarse_masks.iter().zip(coarse_gts) {
        aux += combined_loss(&mask.to_tensor(), cgt)?;
    }
    if reduction == AuxReduction::Mean && !coarse_masks.is_empty() {
        aux /= coarse_masks.len() as f64;
    }
    Ok(LossReport::compose(bce, dice, mae, aux, lambda_aux))
}

/// Analytic `∂(bce + dice + mae)/∂pred`, one entry per pixel.
///
/// The BCE term is zero where the clamp is active; the MAE term uses
/// `sign(0) = 0`.
pub fn loss_gradient(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_extents(pred, gt)?;
    let n = pred.len() as f64;
    let (inter, sp, sg) = dice_sums(pred, gt);
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + sg + DICE_SMOOTH;

    let grad = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let bce = if p > BCE_EPS && p < 1.0 - BCE_EPS {
                (p - g) / (p * (1.0 - p) * n)
            } else {
                0.0
            };
            let dice = -(2.0 * g * den - num) / (den * den);
            let diff = p - g;
            let mae = if diff > 0.0 {
                1.0 / n
            } else if diff < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
            bce + dice + mae
        })
        .collect();
    Ok(Tensor::from_parts(pred.shape().to_vec(), grad))
}
