//! Instance-adaptive prototype learning.
//!
//! Each foreground class gets a learnable common proposal (CPP) and, per
//! input, an instance proposal (IPP) pooled from the encoder output under the
//! final pseudo mask. A shared MLP fuses the concatenated pair into the class
//! prototype, and the prediction for class `k` is `sigmoid(f_out . g_k)`.
//!
//! Masks use `K + 1` columns with background last; prototypes exist only for
//! the `K` foreground columns.

use std::rc::Rc;

use crate::data::LabelVolume;
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, Graph, Interpolation, Mlp, ParamId, ParamStore, ResamplePlan, Tensor, Var};

/// Below this mask mass an instance proposal falls back to plain GAP.
pub const MIN_MASK_MASS: f64 = 1e-8;

/// How mask-weighted features are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// `sum(M F) / sum(M)`.
    #[default]
    MassNormalized,
    /// `sum(M F) / P`.
    VoxelCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IplConfig {
    pub num_classes: usize,
    pub d_i: usize,
    pub d: usize,
    pub pooling: Pooling,
    pub mask_resize: Interpolation,
}

/// Common, instance and fused prototypes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeSet {
    /// `[K, d_i]`.
    pub common: Var,
    /// `[K, d_i]`.
    pub instance: Var,
    /// `[K, d]`.
    pub fused: Var,
}

/// Instance proposals `[K, d_i]` from `f_mid` (`[x, y, z, d_i]`) and a
/// channels-last mask `[X, Y, Z, K + 1]` that is resized to `f_mid`'s grid.
pub fn instance_proposals(
    g: &mut Graph,
    f_mid: Var,
    mask: Var,
    pooling: Pooling,
    resize: Interpolation,
) -> Result<Var> {
    let fs = g.shape(f_mid).to_vec();
    let ms = g.shape(mask).to_vec();
    if fs.len() != 4 || ms.len() != 4 || ms[3] < 2 {
        return Err(Error::dim("instance_proposals", &fs, &ms));
    }
    let k = ms[3] - 1;
    let grid = [fs[0], fs[1], fs[2]];
    let p: usize = grid.iter().product();
    let mask = if [ms[0], ms[1], ms[2]] == grid {
        mask
    } else {
        let plan = ResamplePlan::new([ms[0], ms[1], ms[2]], grid, resize)?;
        g.resample(mask, Rc::new(plan))?
    };
    let flat = g.reshape(mask, [p, k + 1])?;
    let fg = g.slice_cols(flat, 0, k)?;
    let mut w = g.transpose(fg)?;
    let f = g.reshape(f_mid, [p, fs[3]])?;
    match pooling {
        Pooling::VoxelCount => {
            let num = g.matmul(w, f)?;
            Ok(g.scale(num, 1.0 / p as f64))
        }
        Pooling::MassNormalized => {
            let mass: Vec<f64> = g.value(w).data().chunks_exact(p).map(|r| r.iter().sum()).collect();
            let light: Vec<bool> = mass.iter().map(|&m| m < MIN_MASK_MASS).collect();
            if light.iter().any(|&l| l) {
                // replace those rows by uniform weights (plain GAP)
                let mut keep = Tensor::ones([k, p]);
                let mut fill = Tensor::zeros([k, p]);
                for (r, _) in light.iter().enumerate().filter(|(_, &l)| l) {
                    keep.data_mut()[r * p..(r + 1) * p].fill(0.0);
                    fill.data_mut()[r * p..(r + 1) * p].fill(1.0);
                }
                let keep = g.constant(keep);
                let fill = g.constant(fill);
                let kept = g.mul(w, keep)?;
                w = g.add(kept, fill)?;
            }
            let num = g.matmul(w, f)?;
            let den = g.sum_axis(w, 1)?;
            g.div_rows(num, den)
        }
    }
}

/// `MLP([instance | common])` row by row, `[K, d]`.
pub fn fuse_prototypes(g: &mut Graph, fusion: &Mlp, instance: Var, common: Var) -> Result<Var> {
    let (a, b) = (g.shape(instance).to_vec(), g.shape(common).to_vec());
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(Error::dim("fuse_prototypes", &a, &b));
    }
    let cat = g.concat_cols(&[instance, common])?;
    fusion.forward(g, cat)
}

/// `sigmoid(f_out . g_k)` for every voxel and class. Returns `[P, K]` with
/// voxels in row-major order of `f_out`'s grid.
pub fn predict_masks(g: &mut Graph, f_out: Var, fused: Var) -> Result<Var> {
    let (fs, ps) = (g.shape(f_out).to_vec(), g.shape(fused).to_vec());
    if fs.len() != 4 || ps.len() != 2 || fs[3] != ps[1] {
        return Err(Error::dim("predict_masks", &fs, &ps));
    }
    let p = fs[0] * fs[1] * fs[2];
    let f = g.reshape(f_out, [p, fs[3]])?;
    let gt = g.transpose(fused)?;
    let logits = g.matmul(f, gt)?;
    Ok(g.sigmoid(logits))
}

/// Sign of the exponent in the pixel-to-prototype distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbSign {
    /// `exp(-cos)`: dissimilar prototypes get more mass.
    #[default]
    Negative,
    /// `exp(+cos)`: the usual similarity-proportional form.
    Positive,
}

/// Softmax over prototypes of `exp(sign * cos(f, g_k))`.
pub fn pixel_to_prototype_prob(f: &[f64], prototypes: &Tensor, sign: ProbSign) -> Result<Vec<f64>> {
    let (k, d) = prototypes.rows_cols();
    if f.len() != d {
        return Err(Error::dim("pixel_to_prototype_prob", &[f.len()], prototypes.shape()));
    }
    let s = match sign {
        ProbSign::Negative => -1.0,
        ProbSign::Positive => 1.0,
    };
    let logits = (0..k)
        .map(|r| cosine_sim(f, prototypes.row(r)).map(|c| s * c))
        .collect::<Result<Vec<_>>>()?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Per voxel, the 1-based class with the highest probability if it exceeds
/// `threshold`, else background. Ties go to the lower class.
pub fn label_map(y_hat: &Tensor, extents: [usize; 3], threshold: f64) -> Result<LabelVolume> {
    let (p, k) = y_hat.rows_cols();
    if p != extents.iter().product::<usize>() || k == 0 || k > u8::MAX as usize {
        return Err(Error::dim("label_map", y_hat.shape(), &extents));
    }
    let data = (0..p)
        .map(|r| {
            let row = y_hat.row(r);
            let best = crate::numerics::argmax(row);
            if row[best] > threshold {
                (best + 1) as u8
            } else {
                0
            }
        })
        .collect();
    LabelVolume::new(extents, data)
}

/// Learnable part of IPL: the common proposals and the fusion MLP.
#[derive(Debug, Clone)]
pub struct Ipl {
    pub config: IplConfig,
    pub common: ParamId,
    fusion: Mlp,
}

impl Ipl {
    pub fn new(store: &mut ParamStore, config: IplConfig, seed: u64) -> Self {
        let common = store.init("ipl.common", &[config.num_classes, config.d_i], config.d_i, seed);
        let fusion = Mlp::new(store, "ipl.fusion", &[2 * config.d_i, config.d_i, config.d], seed);
        Ipl { config, common, fusion }
    }

    pub fn fusion(&self) -> &Mlp {
        &self.fusion
    }

    /// Builds prototypes. With `mask = None` the instance half is all zeros,
    /// so the prototypes depend on the common proposals only.
    pub fn prototypes(&self, g: &mut Graph, f_mid: Var, mask: Option<Var>) -> Result<PrototypeSet> {
        let common = g.param(self.common);
        let instance = match mask {
            Some(m) => instance_proposals(g, f_mid, m, self.config.pooling, self.config.mask_resize)?,
            None => g.constant(Tensor::zeros([self.config.num_classes, self.config.d_i])),
        };
        let fused = fuse_prototypes(g, &self.fusion, instance, common)?;
        Ok(PrototypeSet {
            common,
            instance,
            fused,
        })
    }
}
