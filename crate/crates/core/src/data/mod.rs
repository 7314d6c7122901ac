//! Synthetic phantoms, the on-disk volume format and overlap metrics.

pub mod metrics;
pub mod phantom;
pub mod volume_io;

pub use metrics::{dsc, mean_dsc, per_class_dsc, AbsentClass};
pub use phantom::{generate_phantom, PhantomSpec, ShapeKind, ShapeSpec};
pub use volume_io::{
    decode_volume, encode_volume, load_volume, read_volume_file, sample_paths, save_volume, write_volume_file,
    ElementCode, VolumeData,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Discrete voxel labels; 0 is background, `1..=K` are foreground classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub extents: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(extents: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if n == 0 || data.len() != n {
            return Err(Error::dim("LabelVolume::new", &extents, &[data.len()]));
        }
        Ok(LabelVolume { extents, data })
    }

    pub fn filled(extents: [usize; 3], label: u8) -> Self {
        LabelVolume {
            extents,
            data: vec![label; extents.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        let [_, ey, ez] = self.extents;
        self.data[(x * ey + y) * ez + z]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Nearest-label downsampling by an integer `stride`: output voxel `i`
    /// takes the label at `i * stride + stride / 2`.
    pub fn downsample(&self, stride: usize) -> Result<LabelVolume> {
        if stride == 0 || self.extents.iter().any(|&e| e % stride != 0) {
            return Err(Error::dim("downsample", &self.extents, &[stride]));
        }
        let out = self.extents.map(|e| e / stride);
        let off = stride / 2;
        let mut data = Vec::with_capacity(out.iter().product());
        for x in 0..out[0] {
            for y in 0..out[1] {
                for z in 0..out[2] {
                    data.push(self.get(x * stride + off, y * stride + off, z * stride + off));
                }
            }
        }
        LabelVolume::new(out, data)
    }

    /// One-hot `[P, K]` over foreground classes `1..=K` (column `k - 1`).
    pub fn one_hot_foreground(&self, k: usize) -> Tensor {
        let mut t = Tensor::zeros([self.len(), k]);
        for (i, &l) in self.data.iter().enumerate() {
            if l >= 1 && (l as usize) <= k {
                t.data_mut()[i * k + l as usize - 1] = 1.0;
            }
        }
        t
    }

    /// One-hot `[P, K + 1]` with background in the last column, matching the
    /// pseudo-mask layout.
    pub fn one_hot_with_background(&self, k: usize) -> Tensor {
        let k1 = k + 1;
        let mut t = Tensor::zeros([self.len(), k1]);
        for (i, &l) in self.data.iter().enumerate() {
            let col = if l == 0 || l as usize > k { k } else { l as usize - 1 };
            t.data_mut()[i * k1 + col] = 1.0;
        }
        t
    }
}

/// An intensity volume with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    /// `[X, Y, Z, 1]`.
    pub intensities: Tensor,
    pub labels: LabelVolume,
    pub id: String,
}

impl VolumeSample {
    pub fn new(intensities: Tensor, labels: LabelVolume, id: impl Into<String>) -> Result<Self> {
        let ext = intensities.spatial()?;
        if ext != labels.extents || intensities.shape()[3] != 1 {
            return Err(Error::dim("VolumeSample::new", intensities.shape(), &labels.extents));
        }
        Ok(VolumeSample {
            intensities,
            labels,
            id: id.into(),
        })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.labels.extents
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_takes_cell_centres() {
        let data: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
        let lv = LabelVolume::new([4, 4, 4], data).unwrap();
        let d = lv.downsample(2).unwrap();
        assert_eq!(d.extents, [2, 2, 2]);
        // z index 1 and 3 of the source
        assert_eq!(d.data, vec![1, 3, 1, 3, 1, 3, 1, 3]);
        assert!(lv.downsample(3).is_err());
    }

    #[test]
    fn one_hot_layouts() {
        let lv = LabelVolume::new([1, 1, 3], vec![0, 1, 2]).unwrap();
        assert_eq!(lv.one_hot_foreground(2).data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            lv.one_hot_with_background(2).data(),
            &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
    }
}
