//! Soft dice + BCE segmentation loss, the per-layer auxiliary mask loss and
//! their weighted sum.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the summed auxiliary losses.
    pub alpha: f64,
    /// Dice smoothing.
    pub epsilon: f64,
    /// Predictions are clamped to `[bce_clamp, 1 - bce_clamp]` inside BCE.
    pub bce_clamp: f64,
    /// Sum over classes instead of averaging.
    pub sum_classes: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.05,
            epsilon: 1e-6,
            bce_clamp: 1e-7,
            sum_classes: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "loss.alpha = {} must be finite and >= 0",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "loss.epsilon = {} must be positive",
                self.epsilon
            )));
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return Err(Error::Config(format!(
                "loss.bce_clamp = {} must be in (0, 0.5)",
                self.bce_clamp
            )));
        }
        Ok(())
    }
}

/// Plain values of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub aux_per_layer: Vec<f64>,
    pub total: f64,
}

pub fn soft_dice(g: &mut Graph, y: Var, y_hat: Var, cfg: &LossConfig) -> Result<Var> {
    g.soft_dice(y, y_hat, cfg.epsilon)
}

pub fn bce(g: &mut Graph, y: Var, y_hat: Var, cfg: &LossConfig) -> Result<Var> {
    g.bce(y, y_hat, cfg.bce_clamp, 1.0 - cfg.bce_clamp)
}

/// Dice + BCE per column of `[P, C]` tensors, averaged (or summed) over
/// columns.
fn per_class(g: &mut Graph, op: &'static str, y: Var, y_hat: Var, cfg: &LossConfig) -> Result<Var> {
    let (a, b) = (g.shape(y).to_vec(), g.shape(y_hat).to_vec());
    if a.len() != 2 || a != b {
        return Err(Error::dim(op, &a, &b));
    }
    let c = a[1];
    let mut terms = Vec::with_capacity(c);
    for k in 0..c {
        let (yk, pk) = if c == 1 {
            (y, y_hat)
        } else {
            (g.slice_cols(y, k, 1)?, g.slice_cols(y_hat, k, 1)?)
        };
        let d = soft_dice(g, yk, pk, cfg)?;
        let e = bce(g, yk, pk, cfg)?;
        terms.push(g.add(d, e)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(if cfg.sum_classes {
        acc
    } else {
        g.scale(acc, 1.0 / c as f64)
    })
}

/// Segmentation loss over the `K` foreground channels, `[P, K]`.
pub fn seg_loss(g: &mut Graph, y: Var, y_hat: Var, cfg: &LossConfig) -> Result<Var> {
    per_class(g, "seg_loss", y, y_hat, cfg)
}

/// Auxiliary loss of one pseudo mask `[P_l, K + 1]` against labels
/// downsampled to the same grid.
pub fn aux_loss(g: &mut Graph, y: Var, m_l: Var, cfg: &LossConfig) -> Result<Var> {
    per_class(g, "aux_loss", y, m_l, cfg)
}

/// `seg + alpha * sum(aux)`.
pub fn total_loss(g: &mut Graph, seg: Var, aux: &[Var], alpha: f64) -> Result<Var> {
    let mut total = seg;
    if aux.is_empty() {
        return Ok(total);
    }
    let mut s = aux[0];
    for &a in &aux[1..] {
        s = g.add(s, a)?;
    }
    let w = g.scale(s, alpha);
    total = g.add(total, w)?;
    Ok(total)
}

/// `seg + alpha * sum(aux)` on plain numbers.
pub fn total_value(seg: f64, aux: &[f64], alpha: f64) -> f64 {
    seg + alpha * aux.iter().sum::<f64>()
}
