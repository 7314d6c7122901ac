//! Dice similarity between label volumes.

use super::LabelVolume;
use crate::error::{Error, Result};

/// What [`mean_dsc`] does with a class absent from both volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentClass {
    /// Counts as a perfect 1.0.
    #[default]
    ScoreOne,
    /// Left out of the mean.
    Skip,
}

fn check(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.extents != gt.extents || pred.len() != gt.len() {
        return Err(Error::dim("dsc", &pred.extents, &gt.extents));
    }
    Ok(())
}

fn counts(pred: &LabelVolume, gt: &LabelVolume, k: u8) -> (usize, usize, usize) {
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == k, b == k);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    (p, g, both)
}

fn ratio(p: usize, g: usize, both: usize) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// `2|P ∩ G| / (|P| + |G|)` for class `k`; 1.0 when both are empty.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, k: u8) -> Result<f64> {
    check(pred, gt)?;
    let (p, g, both) = counts(pred, gt, k);
    Ok(ratio(p, g, both))
}

/// DSC of every foreground class `1..=K`.
pub fn per_class_dsc(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<Vec<f64>> {
    (1..=num_classes).map(|k| dsc(pred, gt, k as u8)).collect()
}

/// Unweighted mean of [`dsc`] over classes `1..=K`. With
/// [`AbsentClass::Skip`] and every class absent, the result is 1.0.
pub fn mean_dsc(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize, absent: AbsentClass) -> Result<f64> {
    check(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 1..=num_classes {
        let (p, g, both) = counts(pred, gt, k as u8);
        if absent == AbsentClass::Skip && p + g == 0 {
            continue;
        }
        sum += ratio(p, g, both);
        n += 1;
    }
    Ok(if n == 0 { 1.0 } else { sum / n as f64 })
}
