//! The five runner commands.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::checkpoint::read_checkpoint;
use super::config::{ExperimentConfig, Split};
use super::eval::{evaluate_samples, EvalTable};
use super::train::{build_split, EpochRecord, Trainer};
use crate::data::{load_volume, save_volume, VolumeSample};
use crate::error::{Error, Result};
use crate::model::Sipl;
use crate::numerics::{grad_check_params, GradCheckConfig, GradCheckReport, Graph, ParamStore, Var};
use crate::smg::FilterMode;

/// Largest extent accepted by [`cmd_gradcheck`].
pub const GRADCHECK_MAX_EXTENT: usize = 8;

/// Trains from scratch, or continues from `resume`.
pub fn cmd_train(cfg: ExperimentConfig, resume: Option<&Path>) -> Result<Vec<EpochRecord>> {
    let mut t = match resume {
        Some(p) => Trainer::resume(p, Some(cfg.out.clone()))?,
        None => Trainer::new(cfg)?,
    };
    Ok(t.run()?.to_vec())
}

/// Writes the train and held-out phantoms of `cfg` under `cfg.out`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut written = Vec::new();
    for split in [Split::Train, Split::Val] {
        let dir = cfg.out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in build_split(cfg, split)? {
            let (a, b) = save_volume(&s, &dir)?;
            written.extend([a, b]);
        }
    }
    Ok(written)
}

/// Loads every `<id>.img.vol` / `<id>.lbl.vol` pair in `dir`, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<VolumeSample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".img.vol") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.iter().map(|id| load_volume(dir, id)).collect()
}

/// Scores a checkpoint on `dataset` (a directory written by `gen-data`) or,
/// without one, on the held-out split of the checkpoint's config. Writes
/// `eval.csv` and `eval.json` to `out`.
pub fn cmd_eval(checkpoint: &Path, dataset: Option<&Path>, out: &Path) -> Result<EvalTable> {
    let ck = read_checkpoint(checkpoint)?;
    let cfg = ExperimentConfig::parse(&ck.config_text)?;
    let mut store = ParamStore::new();
    let model = Sipl::new(&mut store, cfg.model_config(), cfg.seed)?;
    store.load_from(&ck.store)?;
    let samples = match dataset {
        Some(d) => load_dataset(d)?,
        None => build_split(&cfg, Split::Val)?,
    };
    let k = cfg.data.num_classes;
    for s in &samples {
        if s.extents() != cfg.data.extents {
            return Err(Error::Compatibility(format!(
                "sample {} has extents {:?}, the checkpoint was trained on {:?}",
                s.id,
                s.extents(),
                cfg.data.extents
            )));
        }
        if s.labels.max_label() as usize > k {
            return Err(Error::Compatibility(format!(
                "sample {} has label {}, the checkpoint knows {k} classes",
                s.id,
                s.labels.max_label()
            )));
        }
    }
    let table = evaluate_samples(&model, &store, &samples, ck.epoch, cfg.train.threshold, cfg.eval_absent)?;
    table.write(out)?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Full,
    NoIpl,
    NoSmg,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::Full => "full",
            Component::NoIpl => "-ipl",
            Component::NoSmg => "-smg",
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Component::Full),
            "-ipl" | "no-ipl" => Ok(Component::NoIpl),
            "-smg" | "no-smg" => Ok(Component::NoSmg),
            _ => Err(Error::Config(format!("unknown component '{s}' (full, -ipl, -smg)"))),
        }
    }
}

/// One ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// Fixed overlap thresholds.
    Tau(Vec<f64>),
    /// Query counts.
    Clusters(Vec<usize>),
    /// Decoder scale sets.
    Scales(Vec<Vec<usize>>),
    Component(Vec<Component>),
}

impl FromStr for Sweep {
    type Err = Error;

    /// `tau=0.3,0.5,0.8`, `clusters=8,16,32`, `scales=32;16;8;32,16,8`,
    /// `component=full,-ipl,-smg`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep '{s}' is not kind=values")))?;
        let bad = |v: &str| Error::Config(format!("sweep {kind}: invalid value '{v}'"));
        let nums =
            |v: &str| -> Result<Vec<usize>> { v.split(',').map(|x| x.trim().parse().map_err(|_| bad(x))).collect() };
        let sweep = match kind.trim() {
            "tau" => Sweep::Tau(
                values
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|_| bad(x)))
                    .collect::<Result<_>>()?,
            ),
            "clusters" => Sweep::Clusters(nums(values)?),
            "scales" => Sweep::Scales(values.split(';').map(nums).collect::<Result<_>>()?),
            "component" => Sweep::Component(values.split(',').map(|x| x.trim().parse()).collect::<Result<_>>()?),
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep kind '{other}' (tau, clusters, scales, component)"
                )))
            }
        };
        Ok(sweep)
    }
}

impl Sweep {
    pub fn kind(&self) -> &'static str {
        match self {
            Sweep::Tau(_) => "tau",
            Sweep::Clusters(_) => "clusters",
            Sweep::Scales(_) => "scales",
            Sweep::Component(_) => "component",
        }
    }

    /// `(label, config)` per setting.
    pub fn settings(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        let mut out = Vec::new();
        let mut push = |label: String, f: &dyn Fn(&mut ExperimentConfig)| -> Result<()> {
            let mut c = base.clone();
            f(&mut c);
            let dir: String = label
                .chars()
                .map(|ch| {
                    if ch.is_ascii_alphanumeric() || ch == '.' {
                        ch
                    } else {
                        '_'
                    }
                })
                .collect();
            c.out = base.out.join(format!("{}-{dir}", self.kind()));
            c.validate()?;
            out.push((label, c));
            Ok(())
        };
        match self {
            Sweep::Tau(ts) => {
                for &t in ts {
                    push(t.to_string(), &|c| c.smg.tau = FilterMode::Fixed(t))?;
                }
            }
            Sweep::Clusters(ns) => {
                for &n in ns {
                    if n <= base.data.num_classes {
                        return Err(Error::Config(format!(
                            "clusters sweep: {n} queries must exceed the {} classes",
                            base.data.num_classes
                        )));
                    }
                    push(n.to_string(), &|c| c.smg.num_queries = n)?;
                }
            }
            Sweep::Scales(sets) => {
                for set in sets {
                    let label = set.iter().map(|s| format!("1/{s}")).collect::<Vec<_>>().join("+");
                    push(label, &|c| c.smg.scales = Some(set.clone()))?;
                }
            }
            Sweep::Component(cs) => {
                for &comp in cs {
                    push(comp.label().into(), &|c| match comp {
                        Component::Full => {}
                        Component::NoIpl => c.ipl.enabled = false,
                        Component::NoSmg => c.smg.enabled = false,
                    })?;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub sweep: String,
    pub setting: String,
    pub mean_dsc: f64,
    pub per_class: Vec<f64>,
    pub final_loss: f64,
}

/// Worker threads for sweeps: `SIPL_THREADS` if set, else the available
/// parallelism.
pub fn thread_limit() -> usize {
    std::env::var("SIPL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_setting(sweep: &str, label: &str, cfg: ExperimentConfig) -> Result<AblationRow> {
    let mut t = Trainer::new(cfg)?;
    let final_loss = t.run()?.last().map_or(f64::NAN, |r| r.total);
    let table = evaluate_samples(
        &t.model,
        &t.state.store,
        &t.val,
        t.state.epoch,
        t.config.train.threshold,
        t.config.eval_absent,
    )?;
    table.write(&t.config.out)?;
    Ok(AblationRow {
        sweep: sweep.into(),
        setting: label.into(),
        mean_dsc: table.aggregate.avg,
        per_class: table.aggregate.per_class,
        final_loss,
    })
}

/// Trains and evaluates every setting of `sweep` with the seeds of `base`,
/// running up to `threads` settings at once. Writes `ablation-<kind>.csv`
/// and `.json` under `base.out`.
pub fn cmd_ablate(base: &ExperimentConfig, sweep: &Sweep, threads: usize) -> Result<Vec<AblationRow>> {
    let settings = sweep.settings(base)?;
    let kind = sweep.kind();
    let rows = if threads <= 1 {
        // inline: worker-thread malloc arenas page-fault heavily on the large
        // per-step tensors
        settings
            .iter()
            .map(|(label, cfg)| run_setting(kind, label, cfg.clone()))
            .collect::<Result<Vec<_>>>()?
    } else {
        let results: Vec<Mutex<Option<Result<AblationRow>>>> = settings.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..threads.min(settings.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((label, cfg)) = settings.get(i) else { break };
                    let r = run_setting(kind, label, cfg.clone());
                    *results[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().expect("result slot").expect("every setting ran"))
            .collect::<Result<Vec<_>>>()?
    };

    let dir = &base.out;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(format!("ablation-{kind}.csv"));
    let io = |e: csv::Error| Error::io(&p, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&p).map_err(io)?;
    let k = base.data.num_classes;
    let mut header = vec!["sweep".to_string(), "setting".into()];
    header.extend((1..=k).map(|c| format!("class_{c}")));
    header.extend(["avg".to_string(), "final_loss".into()]);
    w.write_record(&header).map_err(io)?;
    for r in &rows {
        let mut rec = vec![r.sweep.clone(), r.setting.clone()];
        rec.extend(r.per_class.iter().map(|v| v.to_string()));
        rec.extend([r.mean_dsc.to_string(), r.final_loss.to_string()]);
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    let j = dir.join(format!("ablation-{kind}.json"));
    fs::write(&j, serde_json::to_string_pretty(&rows).expect("serialisable")).map_err(|e| Error::io(&j, e))?;
    Ok(rows)
}

/// Gradient checks of the composed graph and its parts.
#[derive(Debug, Clone)]
pub struct GradcheckSummary {
    pub checks: Vec<(String, GradCheckReport)>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|(_, r)| r.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|(_, r)| r.max_rel_err()).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, r) in &self.checks {
            writeln!(f, "== {name}")?;
            writeln!(f, "{r}")?;
        }
        write!(
            f,
            "{}: max relative error {:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err()
        )
    }
}

fn energy(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        let sq = g.mul(v, v)?;
        let m = g.mean(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
    }
    acc.ok_or_else(|| Error::Usage("nothing to check".into()))
}

/// Central-difference checks (step 1e-5, tolerance 1e-3) of the total loss,
/// its segmentation and auxiliary parts, and the backbone features, over
/// every parameter. `corrupt_backward` perturbs the matmul backward pass as a
/// negative control.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, corrupt_backward: bool) -> Result<GradcheckSummary> {
    if cfg.data.extents.iter().any(|&e| e > GRADCHECK_MAX_EXTENT) {
        return Err(Error::Usage(format!(
            "gradcheck needs extents <= {GRADCHECK_MAX_EXTENT}, got {:?}",
            cfg.data.extents
        )));
    }
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = Sipl::new(&mut store, cfg.model_config(), cfg.seed)?;
    let sample = crate::data::generate_phantom(&cfg.phantom_spec(Split::Train, 0))?;
    let gc = GradCheckConfig {
        step: 1e-5,
        tol: 1e-3,
        seed: cfg.seed,
        ..Default::default()
    };
    let loss = &cfg.loss;
    let mut checks = Vec::new();
    let full = grad_check_params(
        &store,
        |g| Ok(model.sample_loss(g, &sample, 0, loss)?.1.total),
        &gc,
        corrupt_backward,
    )?;
    checks.push(("full".to_string(), full));
    let seg = grad_check_params(
        &store,
        |g| Ok(model.sample_loss(g, &sample, 0, loss)?.1.seg),
        &gc,
        corrupt_backward,
    )?;
    checks.push(("seg".to_string(), seg));
    if model.smg.is_some() {
        let aux = grad_check_params(
            &store,
            |g| {
                let (_, l) = model.sample_loss(g, &sample, 0, loss)?;
                let zero_seg = g.scale(l.seg, 0.0);
                crate::losses::total_loss(g, zero_seg, &l.aux, 1.0)
            },
            &gc,
            corrupt_backward,
        )?;
        checks.push(("aux".to_string(), aux));
    }
    let bb = grad_check_params(
        &store,
        |g| {
            let v = g.constant(sample.intensities.clone());
            let p = model.backbone.forward(g, v)?;
            let mut vars = vec![p.f_mid, p.f_out];
            vars.extend(p.f_scales.values().copied());
            energy(g, &vars)
        },
        &gc,
        corrupt_backward,
    )?;
    checks.push(("backbone".to_string(), bb));
    Ok(GradcheckSummary { checks })
}
