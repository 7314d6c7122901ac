//! Toy 3-D encoder and pixel decoder.
//!
//! The encoder is a stack of stride-2 `3x3x3` convolutions with ReLU. The pixel
//! decoder climbs back up with kernel-2 transposed convolutions; at every level
//! the matching encoder output (the input volume itself at full resolution)
//! is added after a `1x1x1` projection. The three coarsest decoder levels are
//! projected to the query width and exposed to the mask decoder, and the
//! full-resolution level yields the per-voxel embedding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Conv3d, ConvUp3d, Graph, Linear, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Width of the encoder output (the intermediate feature map).
    pub d_i: usize,
    /// Width of the full-resolution embedding.
    pub d: usize,
    /// Width of the features handed to the mask decoder.
    pub d_q: usize,
    /// Number of stride-2 encoder stages; the encoder output stride is
    /// `2^stages`.
    pub stages: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            base_channels: 8,
            d_i: 64,
            d: 16,
            d_q: 32,
            stages: 5,
        }
    }
}

impl BackboneConfig {
    pub fn output_stride(&self) -> usize {
        1 << self.stages
    }

    /// Strides of the decoder taps, coarsest first (`{32, 16, 8}` by default).
    pub fn tap_strides(&self) -> [usize; 3] {
        let s = self.output_stride();
        [s, s / 2, s / 4]
    }

    /// Channel width after encoder stage `i` (1-based).
    pub fn stage_width(&self, i: usize) -> usize {
        if i == self.stages {
            self.d_i
        } else {
            (self.base_channels << (i - 1)).min(self.d_i)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 stages for three decoder scales, got {}",
                self.stages
            )));
        }
        for (k, v) in [
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("d_i", self.d_i),
            ("d", self.d),
            ("d_q", self.d_q),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("backbone.{k} must be positive")));
            }
        }
        Ok(())
    }

    pub fn check_extents(&self, extents: [usize; 3]) -> Result<()> {
        let s = self.output_stride();
        if extents.iter().any(|&e| e == 0 || e % s != 0) {
            return Err(Error::Config(format!(
                "volume extents {extents:?} must be divisible by the encoder stride {s}"
            )));
        }
        Ok(())
    }
}

/// Decoder outputs for one input volume.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Encoder output, `[X/S, Y/S, Z/S, d_i]`.
    pub f_mid: Var,
    /// Decoder taps keyed by stride, each `[X/s, Y/s, Z/s, d_q]`.
    pub f_scales: BTreeMap<usize, Var>,
    /// Full-resolution embedding, `[X, Y, Z, d]`.
    pub f_out: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    encoder: Vec<Conv3d>,
    up: Vec<ConvUp3d>,
    skip: Vec<Linear>,
    taps: Vec<(usize, Linear)>,
    head: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let n = config.stages;
        let width = |i: usize| {
            if i == 0 {
                config.in_channels
            } else {
                config.stage_width(i)
            }
        };
        let encoder = (1..=n)
            .map(|i| Conv3d::new(store, &format!("enc.{i}"), width(i - 1), width(i), 3, 2, seed))
            .collect();
        // level i (0 = full resolution) receives up[i] from level i+1
        let mut up = Vec::with_capacity(n);
        let mut skip = Vec::with_capacity(n);
        for i in 0..n {
            let cout = if i == 0 { config.d } else { width(i) };
            up.push(ConvUp3d::new(store, &format!("dec.up.{i}"), width(i + 1), cout, seed));
            skip.push(Linear::new(store, &format!("dec.skip.{i}"), width(i), cout, seed));
        }
        let taps = config
            .tap_strides()
            .iter()
            .map(|&s| {
                let level = s.trailing_zeros() as usize;
                let cin = if level == 0 { config.d } else { width(level) };
                (s, Linear::new(store, &format!("dec.tap.{s}"), cin, config.d_q, seed))
            })
            .collect();
        let head = Linear::new(store, "dec.head", config.d, config.d, seed);
        Ok(Backbone {
            config,
            encoder,
            up,
            skip,
            taps,
            head,
        })
    }

    /// Runs the encoder; returns every stage output, the last being `f_mid`.
    pub fn encode_stages(&self, g: &mut Graph, volume: Var) -> Result<Vec<Var>> {
        let extents = match g.shape(volume) {
            &[x, y, z, c] if c == self.config.in_channels => [x, y, z],
            other => {
                return Err(Error::dim("encode", other, &[0, 0, 0, self.config.in_channels]));
            }
        };
        self.config.check_extents(extents)?;
        let mut stages = Vec::with_capacity(self.encoder.len());
        let mut h = volume;
        for conv in &self.encoder {
            let y = conv.forward(g, h)?;
            h = g.relu(y);
            stages.push(h);
        }
        Ok(stages)
    }

    pub fn encode(&self, g: &mut Graph, volume: Var) -> Result<Var> {
        Ok(*self.encode_stages(g, volume)?.last().expect("stages >= 2"))
    }

    /// Full encoder + pixel decoder pass.
    pub fn forward(&self, g: &mut Graph, volume: Var) -> Result<FeaturePyramid> {
        let stages = self.encode_stages(g, volume)?;
        self.decode(g, volume, &stages)
    }

    /// Pixel decoder over the encoder `stages` (`stages[i-1]` is level `i`).
    pub fn decode(&self, g: &mut Graph, volume: Var, stages: &[Var]) -> Result<FeaturePyramid> {
        let n = self.config.stages;
        if stages.len() != n {
            return Err(Error::Usage(format!(
                "expected {n} encoder stages, got {}",
                stages.len()
            )));
        }
        let f_mid = stages[n - 1];
        let mut levels: Vec<Option<Var>> = vec![None; n + 1];
        levels[n] = Some(f_mid);
        let mut h = f_mid;
        for i in (0..n).rev() {
            let skip_src = if i == 0 { volume } else { stages[i - 1] };
            let u = self.up[i].forward(g, h)?;
            let s = self.skip[i].forward_volume(g, skip_src)?;
            let sum = g.add(u, s)?;
            h = g.relu(sum);
            levels[i] = Some(h);
        }
        let mut f_scales = BTreeMap::new();
        for (stride, proj) in &self.taps {
            let level = stride.trailing_zeros() as usize;
            let src = levels[level].expect("all levels computed");
            f_scales.insert(*stride, proj.forward_volume(g, src)?);
        }
        let f_out = self.head.forward_volume(g, levels[0].expect("full resolution level"))?;
        Ok(FeaturePyramid { f_mid, f_scales, f_out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn build(stages: usize) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            stages,
            ..Default::default()
        };
        let bb = Backbone::new(&mut store, cfg, 5).unwrap();
        (store, bb)
    }

    #[test]
    fn pyramid_shapes_for_32_cube() {
        let (store, bb) = build(5);
        let mut g = Graph::new();
        g.bind(&store);
        let v = g.constant(Tensor::full([32, 32, 32, 1], 0.5));
        let p = bb.forward(&mut g, v).unwrap();
        assert_eq!(g.shape(p.f_mid), &[1, 1, 1, 64]);
        assert_eq!(g.shape(p.f_scales[&32]), &[1, 1, 1, 32]);
        assert_eq!(g.shape(p.f_scales[&16]), &[2, 2, 2, 32]);
        assert_eq!(g.shape(p.f_scales[&8]), &[4, 4, 4, 32]);
        assert_eq!(g.shape(p.f_out), &[32, 32, 32, 16]);
    }

    #[test]
    fn encode_64_cube_and_zero_input() {
        let (mut store, bb) = build(5);
        let mut g = Graph::new();
        g.bind(&store);
        let v = g.constant(Tensor::full([64, 32, 64, 1], 0.1));
        let f = bb.encode(&mut g, v).unwrap();
        assert_eq!(g.shape(f), &[2, 1, 2, 64]);

        for p in store.iter_mut().filter(|p| p.name.ends_with(".b")) {
            p.tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        g.bind(&store);
        let v = g.constant(Tensor::zeros([32, 32, 32, 1]));
        let f = bb.encode(&mut g, v).unwrap();
        assert!(g.value(f).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_indivisible_extents() {
        let (store, bb) = build(5);
        let mut g = Graph::new();
        g.bind(&store);
        let v = g.constant(Tensor::zeros([48, 32, 32, 1]));
        assert!(matches!(bb.encode(&mut g, v), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_reaches_first_encoder_stage() {
        let (store, bb) = build(3);
        let mut g = Graph::new();
        g.bind(&store);
        let data: Vec<f64> = (0..512).map(|i| ((i * 37 % 17) as f64) / 17.0).collect();
        let v = g.constant(Tensor::new([8, 8, 8, 1], data).unwrap());
        let p = bb.forward(&mut g, v).unwrap();
        let s = g.sum(p.f_out);
        g.backward(s).unwrap();
        let id = store.by_name("enc.1.w").unwrap();
        let grad = g.grad(g.param(id)).unwrap();
        let norm: f64 = grad.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0);
    }
}
