//! The composed network: backbone, mask decoder and prototype head, with
//! switches for the two component ablations.
//!
//! With the mask decoder off, IPL pools under a uniform `1 / (K + 1)` mask and
//! there is no auxiliary loss. With IPL off, the instance half of every
//! prototype is zero.

use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::data::{LabelVolume, VolumeSample};
use crate::error::{Error, Result};
use crate::ipl::{label_map, predict_masks, Ipl, IplConfig, Pooling, PrototypeSet};
use crate::losses::{aux_loss, seg_loss, total_loss, LossConfig, LossReport};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::smg::{PseudoMaskStack, SmgConfig, SmgDecoder};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub smg: SmgConfig,
    pub pooling: Pooling,
    pub use_smg: bool,
    pub use_ipl: bool,
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.smg.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.smg.validate()?;
        if self.smg.d_q != self.backbone.d_q {
            return Err(Error::Config(format!(
                "query width {} differs from the backbone tap width {}",
                self.smg.d_q, self.backbone.d_q
            )));
        }
        let taps = self.backbone.tap_strides();
        if let Some(s) = self.smg.scales.iter().find(|s| !taps.contains(s)) {
            return Err(Error::Config(format!(
                "smg.scales: stride {s} is not one of the decoder taps {taps:?}"
            )));
        }
        if self.smg.num_classes == 0 || self.smg.num_classes > u8::MAX as usize - 1 {
            return Err(Error::Config(format!(
                "data.num_classes = {} out of range",
                self.smg.num_classes
            )));
        }
        Ok(())
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub extents: [usize; 3],
    pub pyramid: FeaturePyramid,
    /// Empty when the mask decoder is off.
    pub masks: PseudoMaskStack,
    /// Mask handed to IPL, channels-last `[x, y, z, K + 1]`.
    pub final_mask: Var,
    pub prototypes: PrototypeSet,
    /// Per-voxel class probabilities `[P, K]`.
    pub y_hat: Var,
}

/// Graph handles of a loss evaluation.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub seg: Var,
    pub aux: Vec<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            seg: g.value(self.seg).item(),
            aux_per_layer: self.aux.iter().map(|&a| g.value(a).item()).collect(),
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sipl {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub smg: Option<SmgDecoder>,
    pub ipl: Ipl,
}

impl Sipl {
    /// Registers every parameter in `store`. Parameter values depend only on
    /// their names and `seed`.
    pub fn new(store: &mut ParamStore, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, config.backbone.clone(), seed)?;
        let smg = if config.use_smg {
            Some(SmgDecoder::new(store, config.smg.clone(), seed)?)
        } else {
            None
        };
        let ipl = Ipl::new(
            store,
            IplConfig {
                num_classes: config.num_classes(),
                d_i: config.backbone.d_i,
                d: config.backbone.d,
                pooling: config.pooling,
                mask_resize: config.smg.mask_resize,
            },
            seed,
        );
        Ok(Sipl {
            config,
            backbone,
            smg,
            ipl,
        })
    }

    pub fn forward(&self, g: &mut Graph, volume: Var, epoch: usize) -> Result<ModelOutput> {
        let extents = g.value(volume).spatial()?;
        let pyramid = self.backbone.forward(g, volume)?;
        let k1 = self.config.num_classes() + 1;
        let (masks, final_mask) = match &self.smg {
            Some(smg) => {
                let (_, stack) = smg.run(g, &pyramid, epoch)?;
                let last = stack.last().expect("at least one decoder layer");
                let [x, y, z] = last.extents;
                let m = g.reshape(last.m, [x, y, z, k1])?;
                (stack, m)
            }
            None => {
                let [x, y, z] = g.value(pyramid.f_mid).spatial()?;
                let m = g.constant(Tensor::full([x, y, z, k1], 1.0 / k1 as f64));
                (PseudoMaskStack::default(), m)
            }
        };
        let mask = self.config.use_ipl.then_some(final_mask);
        let prototypes = self.ipl.prototypes(g, pyramid.f_mid, mask)?;
        let y_hat = predict_masks(g, pyramid.f_out, prototypes.fused)?;
        Ok(ModelOutput {
            extents,
            pyramid,
            masks,
            final_mask,
            prototypes,
            y_hat,
        })
    }

    /// Segmentation loss plus one auxiliary term per decoder layer.
    pub fn loss(&self, g: &mut Graph, out: &ModelOutput, labels: &LabelVolume, cfg: &LossConfig) -> Result<LossVars> {
        if labels.extents != out.extents {
            return Err(Error::dim("loss", &labels.extents, &out.extents));
        }
        let k = self.config.num_classes();
        let y = g.constant(labels.one_hot_foreground(k));
        let seg = seg_loss(g, y, out.y_hat, cfg)?;
        let mut aux = Vec::with_capacity(out.masks.layers.len());
        for layer in &out.masks.layers {
            let down = labels.downsample(layer.stride)?;
            let yl = g.constant(down.one_hot_with_background(k));
            aux.push(aux_loss(g, yl, layer.m, cfg)?);
        }
        let total = total_loss(g, seg, &aux, cfg.alpha)?;
        Ok(LossVars { seg, aux, total })
    }

    /// Forward + loss on a graph bound to `store`.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        sample: &VolumeSample,
        epoch: usize,
        cfg: &LossConfig,
    ) -> Result<(ModelOutput, LossVars)> {
        let v = g.constant(sample.intensities.clone());
        let out = self.forward(g, v, epoch)?;
        let loss = self.loss(g, &out, &sample.labels, cfg)?;
        Ok((out, loss))
    }

    /// Label prediction without gradient bookkeeping.
    pub fn predict(
        &self,
        store: &ParamStore,
        intensities: &Tensor,
        epoch: usize,
        threshold: f64,
    ) -> Result<LabelVolume> {
        let mut g = Graph::new();
        g.bind_frozen(store);
        let v = g.constant(intensities.clone());
        let out = self.forward(&mut g, v, epoch)?;
        label_map(g.value(out.y_hat), out.extents, threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    pub(crate) fn tiny(use_smg: bool, use_ipl: bool) -> ModelConfig {
        let backbone = BackboneConfig {
            base_channels: 2,
            d_i: 4,
            d: 4,
            d_q: 8,
            stages: 3,
            ..Default::default()
        };
        let mut smg = SmgConfig::new(2, 8, backbone.tap_strides().to_vec());
        smg.num_queries = 4;
        smg.heads = 2;
        ModelConfig {
            backbone,
            smg,
            pooling: Pooling::MassNormalized,
            use_smg,
            use_ipl,
        }
    }

    #[test]
    fn forward_shapes_and_ablations() {
        let sample = generate_phantom(&PhantomSpec::standard([8, 8, 8], 2, 1)).unwrap();
        for (smg, ipl) in [(true, true), (false, true), (true, false)] {
            let mut store = ParamStore::new();
            let model = Sipl::new(&mut store, tiny(smg, ipl), 3).unwrap();
            let mut g = Graph::new();
            g.bind(&store);
            let (out, loss) = model.sample_loss(&mut g, &sample, 0, &LossConfig::default()).unwrap();
            assert_eq!(g.shape(out.y_hat), &[512, 2]);
            assert_eq!(out.masks.layers.len(), if smg { 6 } else { 0 });
            assert_eq!(loss.aux.len(), out.masks.layers.len());
            let r = loss.report(&g);
            assert!(r.total.is_finite() && r.total > 0.0);
            g.backward(loss.total).unwrap();
        }
    }

    #[test]
    fn mismatched_query_width_is_config_error() {
        let mut cfg = tiny(true, true);
        cfg.smg.d_q = 4;
        let mut store = ParamStore::new();
        assert!(matches!(Sipl::new(&mut store, cfg, 0), Err(Error::Config(_))));
    }
}
