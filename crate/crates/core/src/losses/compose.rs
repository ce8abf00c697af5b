use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCORE_WEIGHT: f64 = 0.5;
pub const SEM_WEIGHT: f64 = 0.2;
pub const DISC_REG_WEIGHT: f64 = 0.001;
pub const DEFAULT_DECODER_LAYERS: usize = 6;

/// Loss components of one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerLosses {
    pub bce: f64,
    pub dice: f64,
    pub score: f64,
    pub sem: f64,
}

impl LayerLosses {
    pub fn instance(&self) -> f64 {
        self.bce + self.dice + SCORE_WEIGHT * self.score
    }
}

/// Losses of the two per-voxel heads used for query selection.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadLosses {
    pub binary: f64,
    pub disc_var: f64,
    pub disc_dist: f64,
    pub disc_reg: f64,
}

/// Every loss term plus the three composites.
///
/// The per-layer fields (`bce`, `dice`, `score`, `sem`, `instance`) hold sums
/// over all decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub layers: usize,
    pub bce: f64,
    pub dice: f64,
    pub score: f64,
    pub sem: f64,
    pub binary: f64,
    pub disc_var: f64,
    pub disc_dist: f64,
    pub disc_reg: f64,
    pub disc: f64,
    pub instance: f64,
    pub total: f64,
    #[serde(rename = "final")]
    pub final_loss: f64,
}

fn check(name: &'static str, value: f64) -> Result<()> {
    if value.is_nan() || value < 0.0 || value.is_infinite() {
        return Err(Error::InvalidLoss { name, value });
    }
    Ok(())
}

/// Combines per-layer and head losses:
/// `instance = bce + dice + 0.5·score`,
/// `total = Σ_layers (instance + 0.2·sem)`,
/// `final = total + binary + (var + dist + 0.001·reg)`.
pub fn compose_losses(layers: &[LayerLosses], heads: HeadLosses) -> Result<LossBreakdown> {
    if layers.is_empty() {
        return Err(Error::InvalidConfig("at least one decoder layer is required".into()));
    }
    for l in layers {
        check("bce", l.bce)?;
        check("dice", l.dice)?;
        check("score", l.score)?;
        check("sem", l.sem)?;
    }
    check("binary", heads.binary)?;
    check("disc_var", heads.disc_var)?;
    check("disc_dist", heads.disc_dist)?;
    check("disc_reg", heads.disc_reg)?;

    let mut b = LossBreakdown {
        layers: layers.len(),
        bce: 0.0,
        dice: 0.0,
        score: 0.0,
        sem: 0.0,
        binary: heads.binary,
        disc_var: heads.disc_var,
        disc_dist: heads.disc_dist,
        disc_reg: heads.disc_reg,
        disc: heads.disc_var + heads.disc_dist + DISC_REG_WEIGHT * heads.disc_reg,
        instance: 0.0,
        total: 0.0,
        final_loss: 0.0,
    };
    for l in layers {
        b.bce += l.bce;
        b.dice += l.dice;
        b.score += l.score;
        b.sem += l.sem;
        b.instance += l.instance();
        b.total += l.instance() + SEM_WEIGHT * l.sem;
    }
    b.final_loss = b.total + b.binary + b.disc;
    Ok(b)
}
