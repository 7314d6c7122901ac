//! Seeded synthetic volumes: one ellipsoid or box per foreground class on a
//! noisy background. Classes are drawn in order, so later shapes carve pieces
//! out of earlier ones and the label regions never overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelVolume, VolumeSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipsoid,
    Box,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Centre range as a fraction of each extent.
    pub center: (f64, f64),
    /// Per-axis radius range in voxels.
    pub radius: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    /// One shape per foreground class; `K = shapes.len()`.
    pub shapes: Vec<ShapeSpec>,
    /// `(mean, jitter)` per foreground class. Each sample draws its class
    /// mean uniformly from `mean ± jitter`.
    pub intensity: Vec<(f64, f64)>,
    pub background: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// `K` classes with evenly spaced intensities in `(0, 1]`, alternating
    /// ellipsoids and boxes, radii between 15% and 28% of the smallest extent.
    pub fn standard(extents: [usize; 3], num_classes: usize, seed: u64) -> Self {
        let m = *extents.iter().min().unwrap_or(&0) as f64;
        let shapes = (0..num_classes)
            .map(|k| ShapeSpec {
                kind: if k % 2 == 0 {
                    ShapeKind::Ellipsoid
                } else {
                    ShapeKind::Box
                },
                center: (0.3, 0.7),
                radius: (0.15 * m, 0.28 * m),
            })
            .collect();
        let intensity = (1..=num_classes)
            .map(|k| (k as f64 / num_classes as f64, 0.08))
            .collect();
        PhantomSpec {
            extents,
            shapes,
            intensity,
            background: (0.0, 0.05),
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.len()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::Spec(format!(
                "phantom extents {:?} must be positive",
                self.extents
            )));
        }
        if self.shapes.is_empty() || self.shapes.len() > u8::MAX as usize {
            return Err(Error::Spec(format!(
                "phantom needs 1..=255 classes, got {}",
                self.shapes.len()
            )));
        }
        if self.intensity.len() != self.shapes.len() {
            return Err(Error::Spec(format!(
                "{} intensity entries for {} classes",
                self.intensity.len(),
                self.shapes.len()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec(format!(
                "noise sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        let min_extent = *self.extents.iter().min().expect("three extents") as f64;
        for (k, s) in self.shapes.iter().enumerate() {
            let (c0, c1) = s.center;
            let (r0, r1) = s.radius;
            if !(0.0 <= c0 && c0 <= c1 && c1 <= 1.0) {
                return Err(Error::Spec(format!(
                    "class {} centre range {:?} outside [0, 1]",
                    k + 1,
                    s.center
                )));
            }
            if !(0.0 < r0 && r0 <= r1) {
                return Err(Error::Spec(format!(
                    "class {} radius range {:?} is empty",
                    k + 1,
                    s.radius
                )));
            }
            if 2.0 * r1 > min_extent {
                return Err(Error::Spec(format!(
                    "class {} radius {r1} does not fit in extents {:?}",
                    k + 1,
                    self.extents
                )));
            }
        }
        Ok(())
    }
}

/// Draws a sample. Deterministic in `spec.seed`; if some class ends up with no
/// voxels the draw is repeated with the next sub-seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<VolumeSample> {
    spec.validate()?;
    for sub in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(sub);
        let labels = draw_labels(spec, &mut rng);
        let k = spec.num_classes();
        if (1..=k).all(|c| labels.count(c as u8) > 0) {
            let intensities = draw_intensities(spec, &labels, &mut rng)?;
            return VolumeSample::new(intensities, labels, format!("phantom-{}", spec.seed));
        }
    }
    Err(Error::Spec(format!(
        "no draw in {MAX_ATTEMPTS} attempts placed every class (seed {})",
        spec.seed
    )))
}

fn draw_labels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> LabelVolume {
    let mut labels = LabelVolume::filled(spec.extents, 0);
    let [ex, ey, ez] = spec.extents;
    for (k, shape) in spec.shapes.iter().enumerate() {
        let c: [f64; 3] =
            std::array::from_fn(|i| rng.random_range(shape.center.0..=shape.center.1) * spec.extents[i] as f64);
        let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(shape.radius.0..=shape.radius.1));
        for x in 0..ex {
            for y in 0..ey {
                for z in 0..ez {
                    let d = [x, y, z].map(|v| v as f64 + 0.5);
                    let u: [f64; 3] = std::array::from_fn(|i| (d[i] - c[i]) / r[i]);
                    let inside = match shape.kind {
                        ShapeKind::Ellipsoid => u.iter().map(|v| v * v).sum::<f64>() <= 1.0,
                        ShapeKind::Box => u.iter().all(|v| v.abs() <= 1.0),
                    };
                    if inside {
                        labels.data[(x * ey + y) * ez + z] = (k + 1) as u8;
                    }
                }
            }
        }
    }
    labels
}

fn draw_intensities(spec: &PhantomSpec, labels: &LabelVolume, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut jittered = |(m, j): (f64, f64)| if j > 0.0 { m + rng.random_range(-j..=j) } else { m };
    let mut means = vec![jittered(spec.background)];
    means.extend(spec.intensity.iter().map(|&mj| jittered(mj)));
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let data = labels
        .data
        .iter()
        .map(|&l| {
            let v = means[l as usize] + if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            // stored as f32 on disk, so keep only f32-representable values
            v as f32 as f64
        })
        .collect();
    let [x, y, z] = spec.extents;
    Tensor::new([x, y, z, 1], data)
}
