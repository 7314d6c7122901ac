//! Dense `f64` tensors, a reverse-mode tape, parameterised layers and a
//! finite-difference gradient checker. Everything else in the crate is built
//! on this module.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod param;
pub mod resample;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, CheckInput, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use nn::{cosine_sim, mhsa_forward, mlp_forward, Conv3d, ConvUp3d, Linear, Mhsa, Mlp};
pub use param::{InitSpec, ParamId, ParamStore, Parameter};
pub use resample::{resize, trilinear_resize, Interpolation, ResamplePlan};
pub use tensor::Tensor;

/// Row-wise argmax with ties going to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (rows, _) = t.rows_cols();
    (0..rows).map(|r| argmax(t.row(r))).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
