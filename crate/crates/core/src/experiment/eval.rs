//! Per-sample DSC tables.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{mean_dsc, per_class_dsc, AbsentClass, VolumeSample};
use crate::error::{Error, Result};
use crate::model::Sipl;
use crate::numerics::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub per_class: Vec<f64>,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalTable {
    pub num_classes: usize,
    pub rows: Vec<EvalRow>,
    /// Column means over `rows`, with id `"mean"`.
    pub aggregate: EvalRow,
}

impl EvalTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["id".to_string()];
        h.extend((1..=self.num_classes).map(|k| format!("class_{k}")));
        h.push("avg".into());
        h
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("eval.csv");
        let io = |e: csv::Error| Error::io(&p, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(&p).map_err(io)?;
        w.write_record(self.header()).map_err(io)?;
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate)) {
            let mut rec = vec![r.id.clone()];
            rec.extend(r.per_class.iter().map(|v| v.to_string()));
            rec.push(r.avg.to_string());
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        let j = dir.join("eval.json");
        let text = serde_json::to_string_pretty(self).expect("serialisable");
        fs::write(&j, text).map_err(|e| Error::io(&j, e))
    }
}

/// Predicts every sample and scores it against its labels.
pub fn evaluate_samples(
    model: &Sipl,
    store: &ParamStore,
    samples: &[VolumeSample],
    epoch: usize,
    threshold: f64,
    absent: AbsentClass,
) -> Result<EvalTable> {
    if samples.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let k = model.config.num_classes();
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict(store, &s.intensities, epoch, threshold)?;
        rows.push(EvalRow {
            id: s.id.clone(),
            per_class: per_class_dsc(&pred, &s.labels, k)?,
            avg: mean_dsc(&pred, &s.labels, k, absent)?,
        });
    }
    let n = rows.len() as f64;
    let aggregate = EvalRow {
        id: "mean".into(),
        per_class: (0..k)
            .map(|c| rows.iter().map(|r| r.per_class[c]).sum::<f64>() / n)
            .collect(),
        avg: rows.iter().map(|r| r.avg).sum::<f64>() / n,
    };
    Ok(EvalTable {
        num_classes: k,
        rows,
        aggregate,
    })
}
