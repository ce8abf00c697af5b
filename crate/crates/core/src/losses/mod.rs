//! Training losses with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its prediction input. Sums run in ascending index order so results are
//! bitwise reproducible.

mod association;
mod compose;
mod discriminative;
pub mod gradcheck;
mod heads;
mod mask;

pub use association::{one_to_many_associate, Association, UnassociatedQuery};
pub use compose::{
    compose_losses, HeadLosses, LayerLosses, LossBreakdown, DEFAULT_DECODER_LAYERS, DISC_REG_WEIGHT, SCORE_WEIGHT, SEM_WEIGHT,
};
pub use discriminative::{discriminative_loss, DiscLoss, DiscMargins};
pub use heads::{binary_tree_loss, semantic_ce_loss};
pub use mask::{bce_mask_loss, dice_loss, instance_mask_losses, score_loss, score_target, InstanceLosses};

use crate::error::{Error, Result};

/// Clamp floor for log arguments.
pub const LOG_EPS: f64 = 1e-7;

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { what, expected, actual });
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
