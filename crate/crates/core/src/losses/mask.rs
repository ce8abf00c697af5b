use crate::cloud::VoxelLabels;
use crate::error::{Error, Result};
use crate::sets::iou;

use super::{check_len, sigmoid, softplus, Association, LossGrad, LOG_EPS};

/// Mean binary cross-entropy of sigmoid mask logits against a binary mask.
///
/// Log terms are evaluated in log-sigmoid form and floored at `ln(LOG_EPS)`;
/// the gradient is `(σ(x) − y) / N` except where the floor is active, where
/// it is zero.
pub fn bce_mask_loss(logits: &[f64], gt: &[bool]) -> Result<LossGrad> {
    check_len("mask ground truth", logits.len(), gt.len())?;
    if logits.is_empty() {
        return Err(Error::EmptyInput("mask has no voxels"));
    }
    let n = logits.len() as f64;
    let floor = LOG_EPS.ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(gt) {
        // ln σ(x) = −softplus(−x), ln(1 − σ(x)) = −softplus(x)
        let log_term = if y { -softplus(-x) } else { -softplus(x) };
        if log_term < floor {
            loss -= floor;
            grad.push(0.0);
        } else {
            loss -= log_term;
            grad.push((sigmoid(x) - if y { 1.0 } else { 0.0 }) / n);
        }
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Smoothed Dice loss `1 − (2Σσy + 1) / (Σσ + Σy + 1)`.
pub fn dice_loss(logits: &[f64], gt: &[bool]) -> Result<LossGrad> {
    check_len("mask ground truth", logits.len(), gt.len())?;
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let mut overlap = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    for (&p, &y) in probs.iter().zip(gt) {
        if y {
            overlap += p;
            sum_y += 1.0;
        }
        sum_p += p;
    }
    let num = 2.0 * overlap + 1.0;
    let den = sum_p + sum_y + 1.0;
    let grad = probs
        .iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let d_dp = (num - if y { 2.0 * den } else { 0.0 }) / (den * den);
            d_dp * p * (1.0 - p)
        })
        .collect();
    Ok(LossGrad { loss: 1.0 - num / den, grad })
}

/// Best IoU of a binarized predicted mask against any ground-truth mask.
///
/// Masks are ascending voxel index lists. An empty prediction, or one that
/// overlaps no ground truth, gets target 0.
pub fn score_target(pred: &[usize], gt_masks: &[Vec<usize>]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    gt_masks.iter().map(|g| iou(pred, g)).fold(0.0, f64::max)
}

/// Mean squared error between predicted scores and their targets.
pub fn score_loss(pred: &[f64], targets: &[f64]) -> Result<LossGrad> {
    check_len("score targets", pred.len(), targets.len())?;
    if pred.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::InvalidLoss { name: "score", value: f64::NAN });
    }
    if pred.is_empty() {
        return Ok(LossGrad { loss: 0.0, grad: Vec::new() });
    }
    let m = pred.len() as f64;
    let loss = pred.iter().zip(targets).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / m;
    let grad = pred.iter().zip(targets).map(|(s, t)| 2.0 * (s - t) / m).collect();
    Ok(LossGrad { loss, grad })
}

/// Instance-mask losses of one decoder layer, averaged over associated queries.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLosses {
    pub bce: f64,
    pub dice: f64,
    pub score: f64,
    /// Score target of every associated query, in association order.
    pub score_targets: Vec<f64>,
}

/// Supervises every associated query's mask with the ground-truth tree of its
/// query voxel. `mask_logits[j]` and `pred_scores[j]` belong to query `j` of the
/// selection the association was built from; dropped queries are skipped.
pub fn instance_mask_losses(
    mask_logits: &[Vec<f64>],
    pred_scores: &[f64],
    assoc: &Association,
    gt: &VoxelLabels,
) -> Result<InstanceLosses> {
    check_len("mask logits per query", assoc.num_queries(), mask_logits.len())?;
    check_len("scores per query", assoc.num_queries(), pred_scores.len())?;
    let gt_masks = gt.instance_masks();
    let all_gt: Vec<Vec<usize>> = gt_masks.values().cloned().collect();

    let (mut bce, mut dice) = (0.0, 0.0);
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for (query, id) in assoc.pairs() {
        let logits = &mask_logits[query];
        check_len("mask logits", gt.len(), logits.len())?;
        let target: Vec<bool> = gt.instance.iter().map(|&i| i == id).collect();
        bce += bce_mask_loss(logits, &target)?.loss;
        dice += dice_loss(logits, &target)?.loss;
        let binarized: Vec<usize> = logits.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(v, _)| v).collect();
        targets.push(score_target(&binarized, &all_gt));
        scores.push(pred_scores[query]);
    }
    let m = targets.len().max(1) as f64;
    Ok(InstanceLosses {
        bce: bce / m,
        dice: dice / m,
        score: score_loss(&scores, &targets)?.loss,
        score_targets: targets,
    })
}
