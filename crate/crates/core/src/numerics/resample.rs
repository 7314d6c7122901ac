//! Separable spatial resampling of channels-last volumes.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Interpolation rule for resizing volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Trilinear with aligned corners.
    #[default]
    Trilinear,
    Nearest,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trilinear" => Ok(Interpolation::Trilinear),
            "nearest" => Ok(Interpolation::Nearest),
            other => Err(Error::Config(format!("unknown interpolation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Interpolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Interpolation::Trilinear => "trilinear",
            Interpolation::Nearest => "nearest",
        })
    }
}

/// Two source taps `(index, weight)` for one output coordinate on one axis.
type Taps = [(usize, f64); 2];

/// Precomputed linear map from `src` extents to `dst` extents.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    src: [usize; 3],
    dst: [usize; 3],
    axes: [Vec<Taps>; 3],
}

/// Source coordinate sampled by output index `i` when mapping `n_in -> n_out`
/// with aligned corners. A single output sample sits at the source centre.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in as f64 - 1.0) / 2.0
    } else {
        i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    }
}

fn axis_taps(n_in: usize, n_out: usize, mode: Interpolation) -> Vec<Taps> {
    (0..n_out)
        .map(|i| {
            let s = source_coord(i, n_in, n_out);
            match mode {
                Interpolation::Nearest => {
                    // round half down keeps ties at the lower index
                    let j = ((s - 0.5).ceil().max(0.0) as usize).min(n_in - 1);
                    [(j, 1.0), (j, 0.0)]
                }
                Interpolation::Trilinear => {
                    let lo = (s.floor() as usize).min(n_in - 1);
                    let hi = (lo + 1).min(n_in - 1);
                    let t = s - lo as f64;
                    [(lo, 1.0 - t), (hi, t)]
                }
            }
        })
        .collect()
}

impl ResamplePlan {
    pub fn new(src: [usize; 3], dst: [usize; 3], mode: Interpolation) -> Result<Self> {
        if src.iter().chain(&dst).any(|&e| e == 0) {
            return Err(Error::Usage(format!(
                "resample extents must be positive: {src:?} -> {dst:?}"
            )));
        }
        let axes = [0, 1, 2].map(|a| axis_taps(src[a], dst[a], mode));
        Ok(ResamplePlan { src, dst, axes })
    }

    pub fn src(&self) -> [usize; 3] {
        self.src
    }

    pub fn dst(&self) -> [usize; 3] {
        self.dst
    }

    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let [_, sy, sz] = self.src;
        let [dx, dy, dz] = self.dst;
        for a in 0..dx {
            for b in 0..dy {
                for c in 0..dz {
                    let o = (a * dy + b) * dz + c;
                    for &(ia, wa) in &self.axes[0][a] {
                        if wa == 0.0 {
                            continue;
                        }
                        for &(ib, wb) in &self.axes[1][b] {
                            if wb == 0.0 {
                                continue;
                            }
                            for &(ic, wc) in &self.axes[2][c] {
                                if wc == 0.0 {
                                    continue;
                                }
                                f(o, (ia * sy + ib) * sz + ic, wa * wb * wc);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let spatial = x.spatial()?;
        if spatial != self.src {
            return Err(Error::dim("resample", x.shape(), &self.src));
        }
        let c = x.shape()[3];
        let xd = x.data();
        let mut out = vec![0.0; self.dst.iter().product::<usize>() * c];
        self.for_each(|o, i, w| {
            for ch in 0..c {
                out[o * c + ch] += w * xd[i * c + ch];
            }
        });
        Tensor::new([self.dst[0], self.dst[1], self.dst[2], c], out)
    }

    /// Adjoint of [`ResamplePlan::apply`]: scatters `g` (dst layout) into `gx`.
    pub fn apply_transpose(&self, g: &[f64], gx: &mut [f64]) {
        let c = g.len() / self.dst.iter().product::<usize>();
        self.for_each(|o, i, w| {
            for ch in 0..c {
                gx[i * c + ch] += w * g[o * c + ch];
            }
        });
    }
}

/// Resizes a channels-last volume to `target` extents.
pub fn trilinear_resize(x: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    resize(x, target, Interpolation::Trilinear)
}

pub fn resize(x: &Tensor, target: [usize; 3], mode: Interpolation) -> Result<Tensor> {
    let src = x.spatial()?;
    if src == target {
        return Ok(x.clone());
    }
    ResamplePlan::new(src, target, mode)?.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_stays_constant() {
        let x = Tensor::full([2, 3, 4, 2], 1.75);
        let y = trilinear_resize(&x, [5, 1, 7]).unwrap();
        assert_eq!(y.shape(), &[5, 1, 7, 2]);
        assert!(y.data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn identity_when_target_matches() {
        let x = Tensor::new([2, 2, 2, 1], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(trilinear_resize(&x, [2, 2, 2]).unwrap(), x);
        // the explicit plan is also exact at identical extents
        let plan = ResamplePlan::new([2, 2, 2], [2, 2, 2], Interpolation::Trilinear).unwrap();
        assert_eq!(plan.apply(&x).unwrap(), x);
    }

    #[test]
    fn ramp_center_is_mean_of_corners() {
        let vals = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];
        let x = Tensor::new([2, 2, 2, 1], vals.to_vec()).unwrap();
        let y = trilinear_resize(&x, [3, 3, 3]).unwrap();
        let mean = vals.iter().sum::<f64>() / 8.0;
        assert!((y.at(&[1, 1, 1, 0]) - mean).abs() < 1e-12);
        // corners are preserved under aligned-corner sampling
        assert_eq!(y.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(y.at(&[2, 2, 2, 0]), 64.0);
    }

    #[test]
    fn values_stay_within_channel_range() {
        let data: Vec<f64> = (0..3 * 2 * 5 * 2).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let x = Tensor::new([3, 2, 5, 2], data).unwrap();
        for mode in [Interpolation::Trilinear, Interpolation::Nearest] {
            let y = resize(&x, [7, 4, 2], mode).unwrap();
            for ch in 0..2 {
                let src = x.data().iter().skip(ch).step_by(2);
                let (lo, hi) = src.fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
                for v in y.data().iter().skip(ch).step_by(2) {
                    assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn transpose_is_adjoint() {
        let plan = ResamplePlan::new([3, 2, 4], [5, 3, 2], Interpolation::Trilinear).unwrap();
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let g: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).cos()).collect();
        let ax = plan.apply(&Tensor::new([3, 2, 4, 1], x.clone()).unwrap()).unwrap();
        let lhs: f64 = ax.data().iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut atg = vec![0.0; 24];
        plan.apply_transpose(&g, &mut atg);
        let rhs: f64 = atg.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
