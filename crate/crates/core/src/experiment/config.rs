//! Flat `section.key = value` experiment configuration.
//!
//! Every key has a default, so a config file only lists what it changes.
//! [`ExperimentConfig::to_text`] writes every key and parses back to an equal
//! value.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::{AbsentClass, PhantomSpec};
use crate::error::{Error, Result};
use crate::ipl::Pooling;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::numerics::Interpolation;
use crate::smg::{FilterMode, Similarity, SmgConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub extents: [usize; 3],
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    /// Dataset seed, independent of the model seed.
    pub seed: u64,
    pub noise_sigma: f64,
    /// Per-sample jitter of the class mean intensities.
    pub intensity_jitter: f64,
    /// Shape radii as fractions of the smallest extent.
    pub radius_min: f64,
    pub radius_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmgSection {
    pub enabled: bool,
    pub num_queries: usize,
    pub heads: usize,
    pub layers: usize,
    /// `None` uses every decoder tap of the backbone.
    pub scales: Option<Vec<usize>>,
    pub similarity: Similarity,
    pub tau: FilterMode,
    pub foreground_only_overlap: bool,
    pub mask_resize: Interpolation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IplSection {
    pub enabled: bool,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Samples whose gradients are averaged per update.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Held-out DSC is computed every this many epochs and after the last.
    pub eval_every: usize,
    /// Write `checkpoint-<epoch>.bin` every this many epochs (0 = never).
    pub checkpoint_every: usize,
    /// Probability threshold for label maps.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub smg: SmgSection,
    pub ipl: IplSection,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval_absent: AbsentClass,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig {
                extents: [32, 32, 32],
                num_classes: 3,
                train: 24,
                val: 8,
                seed: 0,
                noise_sigma: 0.05,
                intensity_jitter: 0.08,
                radius_min: 0.15,
                radius_max: 0.28,
            },
            backbone: BackboneConfig::default(),
            smg: SmgSection {
                enabled: true,
                num_queries: 32,
                heads: 4,
                layers: 6,
                scales: None,
                similarity: Similarity::ScaledDot,
                tau: FilterMode::Schedule,
                foreground_only_overlap: false,
                mask_resize: Interpolation::Trilinear,
            },
            ipl: IplSection {
                enabled: true,
                pooling: Pooling::MassNormalized,
            },
            loss: LossConfig::default(),
            optim: OptimConfig {
                lr: 1e-2,
                momentum: 0.9,
                weight_decay: 1e-5,
                schedule: LrSchedule::Cosine,
                batch_size: 1,
            },
            train: TrainConfig {
                epochs: 200,
                eval_every: 10,
                checkpoint_every: 0,
                threshold: 0.5,
            },
            eval_absent: AbsentClass::ScoreOne,
        }
    }
}

/// Which split a generated sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: invalid value '{value}': {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| bad(key, value, e))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Small 8^3 setup used by gradient checks: two classes, four queries,
    /// query width 8 and three encoder stages.
    pub fn tiny() -> Self {
        let mut c = ExperimentConfig::default();
        c.data.extents = [8, 8, 8];
        c.data.num_classes = 2;
        c.data.train = 2;
        c.data.val = 1;
        c.backbone = BackboneConfig {
            in_channels: 1,
            base_channels: 2,
            d_i: 4,
            d: 4,
            d_q: 8,
            stages: 3,
        };
        c.smg.num_queries = 4;
        c.smg.heads = 2;
        c.train.epochs = 2;
        c.train.eval_every = 1;
        c
    }

    /// Parses config text on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        let boolean = |v: &str| match v {
            "true" | "on" => Ok(true),
            "false" | "off" => Ok(false),
            _ => Err(bad(key, v, "expected true or false")),
        };
        match key {
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.extents" => {
                let e = list(key, v)?;
                self.data.extents = e.try_into().map_err(|_| bad(key, v, "expected three extents"))?;
            }
            "data.num_classes" => self.data.num_classes = num(key, v)?,
            "data.train" => self.data.train = num(key, v)?,
            "data.val" => self.data.val = num(key, v)?,
            "data.seed" => self.data.seed = num(key, v)?,
            "data.noise_sigma" => self.data.noise_sigma = num(key, v)?,
            "data.intensity_jitter" => self.data.intensity_jitter = num(key, v)?,
            "data.radius_min" => self.data.radius_min = num(key, v)?,
            "data.radius_max" => self.data.radius_max = num(key, v)?,
            "backbone.in_channels" => self.backbone.in_channels = num(key, v)?,
            "backbone.base_channels" => self.backbone.base_channels = num(key, v)?,
            "backbone.d_i" => self.backbone.d_i = num(key, v)?,
            "backbone.d" => self.backbone.d = num(key, v)?,
            "backbone.d_q" => self.backbone.d_q = num(key, v)?,
            "backbone.stages" => self.backbone.stages = num(key, v)?,
            "smg.enabled" => self.smg.enabled = boolean(v)?,
            "smg.num_queries" => self.smg.num_queries = num(key, v)?,
            "smg.heads" => self.smg.heads = num(key, v)?,
            "smg.layers" => self.smg.layers = num(key, v)?,
            "smg.scales" => {
                self.smg.scales = if v == "auto" { None } else { Some(list(key, v)?) };
            }
            "smg.similarity" => {
                self.smg.similarity = match v {
                    "dot" => Similarity::ScaledDot,
                    "cosine" => Similarity::Cosine,
                    _ => return Err(bad(key, v, "expected dot or cosine")),
                }
            }
            "smg.tau" => {
                self.smg.tau = match v {
                    "schedule" => FilterMode::Schedule,
                    "off" => FilterMode::Off,
                    _ => FilterMode::Fixed(num(key, v)?),
                }
            }
            "smg.foreground_only_overlap" => self.smg.foreground_only_overlap = boolean(v)?,
            "smg.mask_resize" => self.smg.mask_resize = v.parse().map_err(|e| bad(key, v, e))?,
            "ipl.enabled" => self.ipl.enabled = boolean(v)?,
            "ipl.pooling" => {
                self.ipl.pooling = match v {
                    "mass" => Pooling::MassNormalized,
                    "count" => Pooling::VoxelCount,
                    _ => return Err(bad(key, v, "expected mass or count")),
                }
            }
            "loss.alpha" => self.loss.alpha = num(key, v)?,
            "loss.epsilon" => self.loss.epsilon = num(key, v)?,
            "loss.bce_clamp" => self.loss.bce_clamp = num(key, v)?,
            "loss.sum_classes" => self.loss.sum_classes = boolean(v)?,
            "optim.lr" => self.optim.lr = num(key, v)?,
            "optim.momentum" => self.optim.momentum = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "optim.schedule" => {
                self.optim.schedule = match v {
                    "cosine" => LrSchedule::Cosine,
                    "constant" => LrSchedule::Constant,
                    _ => return Err(bad(key, v, "expected cosine or constant")),
                }
            }
            "optim.batch_size" => self.optim.batch_size = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.eval_every" => self.train.eval_every = num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "train.threshold" => self.train.threshold = num(key, v)?,
            "eval.absent" => {
                self.eval_absent = match v {
                    "one" => AbsentClass::ScoreOne,
                    "skip" => AbsentClass::Skip,
                    _ => return Err(bad(key, v, "expected one or skip")),
                }
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let b = &self.backbone;
        let s = &self.smg;
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data.extents", join(&d.extents)),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.train", d.train.to_string()),
            ("data.val", d.val.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.noise_sigma", d.noise_sigma.to_string()),
            ("data.intensity_jitter", d.intensity_jitter.to_string()),
            ("data.radius_min", d.radius_min.to_string()),
            ("data.radius_max", d.radius_max.to_string()),
            ("backbone.in_channels", b.in_channels.to_string()),
            ("backbone.base_channels", b.base_channels.to_string()),
            ("backbone.d_i", b.d_i.to_string()),
            ("backbone.d", b.d.to_string()),
            ("backbone.d_q", b.d_q.to_string()),
            ("backbone.stages", b.stages.to_string()),
            ("smg.enabled", s.enabled.to_string()),
            ("smg.num_queries", s.num_queries.to_string()),
            ("smg.heads", s.heads.to_string()),
            ("smg.layers", s.layers.to_string()),
            ("smg.scales", s.scales.as_deref().map_or("auto".into(), join)),
            (
                "smg.similarity",
                match s.similarity {
                    Similarity::ScaledDot => "dot".into(),
                    Similarity::Cosine => "cosine".into(),
                },
            ),
            (
                "smg.tau",
                match s.tau {
                    FilterMode::Schedule => "schedule".into(),
                    FilterMode::Off => "off".into(),
                    FilterMode::Fixed(t) => t.to_string(),
                },
            ),
            ("smg.foreground_only_overlap", s.foreground_only_overlap.to_string()),
            ("smg.mask_resize", s.mask_resize.to_string()),
            ("ipl.enabled", self.ipl.enabled.to_string()),
            (
                "ipl.pooling",
                match self.ipl.pooling {
                    Pooling::MassNormalized => "mass".into(),
                    Pooling::VoxelCount => "count".into(),
                },
            ),
            ("loss.alpha", self.loss.alpha.to_string()),
            ("loss.epsilon", self.loss.epsilon.to_string()),
            ("loss.bce_clamp", self.loss.bce_clamp.to_string()),
            ("loss.sum_classes", self.loss.sum_classes.to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.momentum", self.optim.momentum.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            (
                "optim.schedule",
                match self.optim.schedule {
                    LrSchedule::Cosine => "cosine".into(),
                    LrSchedule::Constant => "constant".into(),
                },
            ),
            ("optim.batch_size", self.optim.batch_size.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.eval_every", self.train.eval_every.to_string()),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("train.threshold", self.train.threshold.to_string()),
            (
                "eval.absent",
                match self.eval_absent {
                    AbsentClass::ScoreOne => "one".into(),
                    AbsentClass::Skip => "skip".into(),
                },
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        let scales = self
            .smg
            .scales
            .clone()
            .unwrap_or_else(|| self.backbone.tap_strides().to_vec());
        let mut smg = SmgConfig::new(self.data.num_classes, self.backbone.d_q, scales);
        smg.num_queries = self.smg.num_queries;
        smg.heads = self.smg.heads;
        smg.num_layers = self.smg.layers;
        smg.similarity = self.smg.similarity;
        smg.filter = self.smg.tau;
        smg.foreground_only_overlap = self.smg.foreground_only_overlap;
        smg.mask_resize = self.smg.mask_resize;
        ModelConfig {
            backbone: self.backbone.clone(),
            smg,
            pooling: self.ipl.pooling,
            use_smg: self.smg.enabled,
            use_ipl: self.ipl.enabled,
        }
    }

    /// Phantom spec of sample `index` of `split`.
    pub fn phantom_spec(&self, split: Split, index: usize) -> PhantomSpec {
        let tag = match split {
            Split::Train => 0x7472_u64,
            Split::Val => 0x7661_u64,
        };
        let seed = self
            .data
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag << 32)
            .wrapping_add(index as u64);
        let mut spec = PhantomSpec::standard(self.data.extents, self.data.num_classes, seed);
        let m = *self.data.extents.iter().min().expect("three extents") as f64;
        for s in &mut spec.shapes {
            s.radius = (self.data.radius_min * m, self.data.radius_max * m);
        }
        for i in &mut spec.intensity {
            i.1 = self.data.intensity_jitter;
        }
        spec.noise_sigma = self.data.noise_sigma;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        self.backbone.check_extents(self.data.extents)?;
        if self.data.num_classes == 0 {
            return Err(Error::Config("data.num_classes must be positive".into()));
        }
        if self.data.train == 0 {
            return Err(Error::Config("data.train must be positive".into()));
        }
        if !(0.0 < self.data.radius_min && self.data.radius_min <= self.data.radius_max) {
            return Err(Error::Config(format!(
                "data.radius_min = {} must be positive and <= data.radius_max = {}",
                self.data.radius_min, self.data.radius_max
            )));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr = {} must be positive", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!(
                "optim.momentum = {} must be in [0, 1)",
                o.momentum
            )));
        }
        if o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "optim.weight_decay = {} must be >= 0",
                o.weight_decay
            )));
        }
        if o.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        if self.train.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.threshold) {
            return Err(Error::Config(format!(
                "train.threshold = {} must be in [0, 1)",
                self.train.threshold
            )));
        }
        Ok(())
    }
}
