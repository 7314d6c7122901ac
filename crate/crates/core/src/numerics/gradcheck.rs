//! Central-difference gradient checking.
//!
//! Relative error per coordinate is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor * max(1, |f(x)|))`. The floor only matters for gradients
//! that are essentially zero next to the objective itself, where central
//! differences resolve little more than rounding noise. Scaling it with
//! `|f(x)|` keeps the measure invariant to rescaling the objective.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, as a fraction of
    /// `max(1, |f(x)|)`.
    pub floor: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Result for one leaf tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn entry(&self, name: &str) -> Option<&TensorCheck> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<6} {:<28} checked {:>5}/{:<6} max_rel {:.3e}",
                if e.max_rel_err < self.tol { "ok" } else { "FAIL" },
                e.name,
                e.checked,
                e.numel,
                e.max_rel_err
            )?;
        }
        write!(
            f,
            "{} tensors, max relative error {:.3e} (tol {:.1e})",
            self.entries.len(),
            self.max_rel_err(),
            self.tol
        )
    }
}

/// A leaf handed to [`grad_check`].
#[derive(Debug, Clone)]
pub struct CheckInput {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
}

impl CheckInput {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        CheckInput {
            name: name.into(),
            value,
            requires_grad: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        CheckInput {
            requires_grad: false,
            ..CheckInput::new(name, value)
        }
    }
}

/// Compares the tape gradient of the scalar `f` against central differences
/// for every input that requires a gradient. Frozen inputs are left out of
/// the report.
pub fn grad_check<F>(f: F, inputs: &[CheckInput], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = inputs.iter().map(|i| i.name.clone()).collect();
    let trainable: Vec<bool> = inputs.iter().map(|i| i.requires_grad).collect();
    let values: Vec<Tensor> = inputs.iter().map(|i| i.value.clone()).collect();
    run(&names, &trainable, values, cfg, false, |g, vals| {
        let vars: Vec<Var> = vals
            .iter()
            .zip(&trainable)
            .map(|(v, &rg)| g.leaf(v.clone(), rg))
            .collect();
        let out = f(g, &vars)?;
        Ok((out, vars))
    })
}

/// Like [`grad_check`] over every trainable parameter of `store`; `f`
/// receives a graph with the (perturbed) store already bound.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    cfg: &GradCheckConfig,
    corrupt_backward: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let trainable: Vec<bool> = store.iter().map(|p| p.trainable).collect();
    let values: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
    let mut scratch = store.clone();
    let scratch = std::cell::RefCell::new(&mut scratch);
    run(&names, &trainable, values, cfg, corrupt_backward, |g, vals| {
        let mut s = scratch.borrow_mut();
        for (p, v) in s.iter_mut().zip(vals) {
            p.tensor.data_mut().copy_from_slice(v.data());
        }
        g.bind(&s);
        let vars = s.ids().map(|id| g.param(id)).collect();
        drop(s);
        let out = f(g)?;
        Ok((out, vars))
    })
}

fn run<B>(
    names: &[String],
    trainable: &[bool],
    mut values: Vec<Tensor>,
    cfg: &GradCheckConfig,
    corrupt_backward: bool,
    build: B,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &[Tensor]) -> Result<(Var, Vec<Var>)>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let (out, _) = build(&mut g, vals)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    g.set_corrupt_backward(corrupt_backward);
    let (out, vars) = build(&mut g, &values)?;
    let f0 = scalar_of(&g, out)?;
    let floor = cfg.floor * f0.abs().max(1.0);
    g.backward(out)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|&v| g.grad(v)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    for t in 0..values.len() {
        if !trainable[t] {
            continue;
        }
        let numel = values[t].numel();
        let grad = analytic[t]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(values[t].shape().to_vec()));
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < numel => {
                let mut c = sample(&mut rng, numel, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut entry = TensorCheck {
            name: names[t].clone(),
            numel,
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            analytic_norm: grad.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
        };
        for &i in &coords {
            let orig = values[t].data()[i];
            values[t].data_mut()[i] = orig + cfg.step;
            let plus = eval(&values)?;
            values[t].data_mut()[i] = orig - cfg.step;
            let minus = eval(&values)?;
            values[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > entry.max_rel_err || !rel.is_finite() {
                entry.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                entry.worst_index = i;
                entry.worst_analytic = a;
                entry.worst_numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { tol: cfg.tol, entries })
}

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
