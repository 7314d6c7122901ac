//! Finite-difference checks: one hand-built expression and the whole model
//! on an 8^3 volume.

use sipl::experiment::{cmd_gradcheck, ExperimentConfig};
use sipl::numerics::{grad_check, CheckInput, GradCheckConfig, Tensor};

fn main() -> sipl::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.4]]);
    let w = Tensor::from_rows(&[vec![0.7, -0.2], vec![0.1, 0.9], vec![-0.5, 0.3]]);
    let report = grad_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let p = g.softmax(h, 1)?;
            let s = g.sigmoid(p);
            Ok(g.sum(s))
        },
        &[CheckInput::new("x", x), CheckInput::new("w", w)],
        &GradCheckConfig::default(),
    )?;
    println!("{report}\n");

    let summary = cmd_gradcheck(&ExperimentConfig::tiny(), false)?;
    println!("{summary}");
    Ok(())
}
