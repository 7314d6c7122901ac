//! Sweeps the overlap threshold on the tiny configuration. Any sweep string
//! accepted by the CLI works, e.g. `component=full,-ipl,-smg`.
//!
//! `SIPL_THREADS` caps how many settings train at once.

use sipl::experiment::{cmd_ablate, thread_limit, ExperimentConfig, Sweep};

fn main() -> sipl::Result<()> {
    let spec = std::env::args().nth(1).unwrap_or_else(|| "tau=0.1,0.3,0.5".into());
    let sweep: Sweep = spec.parse()?;
    let mut cfg = ExperimentConfig::tiny();
    cfg.train.epochs = 5;
    cfg.out = std::env::temp_dir().join("sipl-ablation-example");
    for row in cmd_ablate(&cfg, &sweep, thread_limit())? {
        println!(
            "{} {:<12} mean DSC {:.3}  final loss {:.4}",
            row.sweep, row.setting, row.mean_dsc, row.final_loss
        );
    }
    Ok(())
}
