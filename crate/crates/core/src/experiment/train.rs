//! SGD training loop, per-epoch metrics and checkpoints.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use super::config::{ExperimentConfig, LrSchedule, Split};
use crate::data::{generate_phantom, mean_dsc, per_class_dsc, VolumeSample};
use crate::error::{Error, Result};
use crate::model::Sipl;
use crate::numerics::{Graph, ParamStore, Tensor};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// Completed epochs; 0 is the untrained model.
    pub epoch: usize,
    pub lr: f64,
    /// Mean training losses over the epoch (before each update).
    pub seg: f64,
    pub aux: Vec<f64>,
    pub total: f64,
    pub val_dsc: Option<f64>,
    pub val_per_class: Option<Vec<f64>>,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub store: ParamStore,
    pub velocity: Vec<Tensor>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

pub fn build_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<VolumeSample>> {
    let n = match split {
        Split::Train => cfg.data.train,
        Split::Val => cfg.data.val,
    };
    (0..n)
        .map(|i| {
            let mut s = generate_phantom(&cfg.phantom_spec(split, i))?;
            s.id = format!("{}-{i:03}", split.name());
            Ok(s)
        })
        .collect()
}

/// Learning rate for epoch index `t` (0-based) of `total`.
pub fn learning_rate(cfg: &ExperimentConfig, t: usize) -> f64 {
    match cfg.optim.schedule {
        LrSchedule::Constant => cfg.optim.lr,
        LrSchedule::Cosine => {
            let total = cfg.train.epochs.max(1) as f64;
            cfg.optim.lr * 0.5 * (1.0 + (PI * t as f64 / total).cos())
        }
    }
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Sipl,
    pub train: Vec<VolumeSample>,
    pub val: Vec<VolumeSample>,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Sipl::new(&mut store, config.model_config(), config.seed)?;
        let velocity = store.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let train = build_split(&config, Split::Train)?;
        let val = build_split(&config, Split::Val)?;
        Ok(Trainer {
            config,
            model,
            train,
            val,
            state: TrainState {
                epoch: 0,
                store,
                velocity,
                rng,
                history: Vec::new(),
            },
        })
    }

    /// Restores a run from `path`. The checkpoint's config wins over
    /// `out`, which only redirects where new files go.
    pub fn resume(path: &Path, out: Option<PathBuf>) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let mut config = ExperimentConfig::parse(&ck.config_text)?;
        if let Some(o) = out {
            config.out = o;
        }
        let mut t = Trainer::new(config)?;
        t.state.store.load_from(&ck.store)?;
        if ck.velocity.len() != t.state.velocity.len() {
            return Err(Error::Compatibility(
                "optimizer state does not match the parameters".into(),
            ));
        }
        t.state.velocity = ck.velocity;
        t.state.rng = ck.rng;
        t.state.epoch = ck.epoch;
        t.state.history = ck.history;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_text(),
            epoch: self.state.epoch,
            store: self.state.store.clone(),
            velocity: self.state.velocity.clone(),
            rng: self.state.rng.clone(),
            history: self.state.history.clone(),
        }
    }

    /// Mean DSC and per-class mean DSC over `samples`.
    pub fn evaluate(&self, samples: &[VolumeSample]) -> Result<(f64, Vec<f64>)> {
        let k = self.config.data.num_classes;
        let mut mean = 0.0;
        let mut per = vec![0.0; k];
        for s in samples {
            let pred = self.model.predict(
                &self.state.store,
                &s.intensities,
                self.state.epoch,
                self.config.train.threshold,
            )?;
            mean += mean_dsc(&pred, &s.labels, k, self.config.eval_absent)?;
            for (a, d) in per.iter_mut().zip(per_class_dsc(&pred, &s.labels, k)?) {
                *a += d;
            }
        }
        let n = samples.len().max(1) as f64;
        Ok((mean / n, per.into_iter().map(|v| v / n).collect()))
    }

    fn val_metrics(&self, force: bool) -> Result<(Option<f64>, Option<Vec<f64>>)> {
        let due = force || self.state.epoch.is_multiple_of(self.config.train.eval_every);
        if self.val.is_empty() || !due {
            return Ok((None, None));
        }
        let (m, p) = self.evaluate(&self.val)?;
        Ok((Some(m), Some(p)))
    }

    /// Losses of the current parameters on the training set, no update.
    fn initial_record(&self) -> Result<EpochRecord> {
        let cfg = &self.config;
        let mut sums = Sums::default();
        for s in &self.train {
            let mut g = Graph::new();
            g.bind_frozen(&self.state.store);
            let (_, loss) = self.model.sample_loss(&mut g, s, 0, &cfg.loss)?;
            sums.add(&loss.report(&g));
        }
        let (val_dsc, val_per_class) = self.val_metrics(true)?;
        Ok(sums.record(0, learning_rate(cfg, 0), self.train.len(), val_dsc, val_per_class))
    }

    /// Runs one epoch of per-sample SGD and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let t = self.state.epoch;
        let lr = learning_rate(&self.config, t);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.state.rng);
        let mut sums = Sums::default();
        let bs = self.config.optim.batch_size;
        for chunk in order.chunks(bs) {
            let mut grads: Vec<Option<Tensor>> = vec![None; self.state.store.len()];
            for &i in chunk {
                let mut g = Graph::new();
                g.bind(&self.state.store);
                let (_, loss) = self.model.sample_loss(&mut g, &self.train[i], t, &self.config.loss)?;
                let report = loss.report(&g);
                if !report.total.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite loss at epoch {t} on {}",
                        self.train[i].id
                    )));
                }
                sums.add(&report);
                g.backward(loss.total)?;
                for (id, v) in g.bound_params() {
                    if let Some(gr) = g.grad(v) {
                        match &mut grads[id.index()] {
                            Some(acc) => acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(gr),
                        }
                    }
                }
            }
            self.step(&grads, lr, chunk.len());
        }
        self.state.epoch += 1;
        let last = self.state.epoch == self.config.train.epochs;
        let (val_dsc, val_per_class) = self.val_metrics(last)?;
        Ok(sums.record(self.state.epoch, lr, self.train.len(), val_dsc, val_per_class))
    }

    /// `v = mu v + (g + wd w)`, `w -= lr v`.
    fn step(&mut self, grads: &[Option<Tensor>], lr: f64, batch: usize) {
        let (mu, wd) = (self.config.optim.momentum, self.config.optim.weight_decay);
        let scale = 1.0 / batch as f64;
        for ((p, v), g) in self.state.store.iter_mut().zip(&mut self.state.velocity).zip(grads) {
            if !p.trainable {
                continue;
            }
            let w = p.tensor.data_mut();
            let v = v.data_mut();
            for i in 0..w.len() {
                let gi = g.as_ref().map_or(0.0, |g| g.data()[i] * scale);
                v[i] = mu * v[i] + gi + wd * w[i];
                w[i] -= lr * v[i];
            }
        }
    }

    /// Trains to `train.epochs`, writing metrics after every epoch and the
    /// final checkpoint to the output directory.
    pub fn run(&mut self) -> Result<&[EpochRecord]> {
        let out = self.config.out.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        fs::write(out.join("config.txt"), self.config.to_text()).map_err(|e| Error::io(out.join("config.txt"), e))?;
        if self.state.history.is_empty() {
            let r = self.initial_record()?;
            self.state.history.push(r);
            write_metrics(&out, &self.config, &self.state.history)?;
        }
        while self.state.epoch < self.config.train.epochs {
            let r = self.run_epoch()?;
            self.state.history.push(r);
            write_metrics(&out, &self.config, &self.state.history)?;
            let every = self.config.train.checkpoint_every;
            if every > 0 && self.state.epoch.is_multiple_of(every) {
                write_checkpoint(
                    &out.join(format!("checkpoint-{}.bin", self.state.epoch)),
                    &self.checkpoint(),
                )?;
            }
        }
        write_checkpoint(&out.join("checkpoint.bin"), &self.checkpoint())?;
        Ok(&self.state.history)
    }
}

#[derive(Default)]
struct Sums {
    seg: f64,
    aux: Vec<f64>,
    total: f64,
}

impl Sums {
    fn add(&mut self, r: &crate::losses::LossReport) {
        self.seg += r.seg;
        self.total += r.total;
        if self.aux.is_empty() {
            self.aux = vec![0.0; r.aux_per_layer.len()];
        }
        for (a, b) in self.aux.iter_mut().zip(&r.aux_per_layer) {
            *a += b;
        }
    }

    fn record(
        self,
        epoch: usize,
        lr: f64,
        n: usize,
        val_dsc: Option<f64>,
        val_per_class: Option<Vec<f64>>,
    ) -> EpochRecord {
        let n = n.max(1) as f64;
        EpochRecord {
            epoch,
            lr,
            seg: self.seg / n,
            aux: self.aux.into_iter().map(|a| a / n).collect(),
            total: self.total / n,
            val_dsc,
            val_per_class,
        }
    }
}

#[derive(Serialize)]
struct ConfigEvent<'a> {
    event: &'static str,
    config: &'a str,
}

#[derive(Serialize)]
struct EpochEvent<'a> {
    event: &'static str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Config text recorded in metrics files: everything except the output
/// directory, so identical experiments log identical bytes.
pub fn identity_text(cfg: &ExperimentConfig) -> String {
    cfg.to_text()
        .lines()
        .filter(|l| !l.starts_with("out ="))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Rewrites `metrics.jsonl` and `metrics.csv` from `history`.
pub fn write_metrics(out: &Path, cfg: &ExperimentConfig, history: &[EpochRecord]) -> Result<()> {
    let text = identity_text(cfg);
    let mut jsonl = serde_json::to_string(&ConfigEvent {
        event: "config",
        config: &text,
    })
    .expect("serialisable");
    jsonl.push('\n');
    for r in history {
        jsonl.push_str(
            &serde_json::to_string(&EpochEvent {
                event: "epoch",
                record: r,
            })
            .expect("serialisable"),
        );
        jsonl.push('\n');
    }
    let p = out.join("metrics.jsonl");
    fs::write(&p, jsonl).map_err(|e| Error::io(&p, e))?;

    let p = out.join("metrics.csv");
    let io = |e: csv::Error| Error::io(&p, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&p).map_err(io)?;
    let layers = history.iter().map(|r| r.aux.len()).max().unwrap_or(0);
    let mut header = vec!["epoch".to_string(), "lr".into(), "seg".into()];
    header.extend((0..layers).map(|l| format!("aux_{l}")));
    header.extend(["total".to_string(), "val_dsc".into()]);
    w.write_record(&header).map_err(io)?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.lr.to_string(), r.seg.to_string()];
        row.extend((0..layers).map(|l| r.aux.get(l).map_or(String::new(), |a| a.to_string())));
        row.push(r.total.to_string());
        row.push(r.val_dsc.map_or(String::new(), |v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    Ok(())
}
