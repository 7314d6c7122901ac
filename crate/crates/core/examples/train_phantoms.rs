//! Trains on synthetic 32^3 phantoms and prints the learning curve.
//!
//! ```text
//! cargo run --release --example train_phantoms -- [epochs] [out-dir]
//! ```
//! The full default schedule is 200 epochs (about 8 minutes on one core).

use std::path::PathBuf;

use sipl::experiment::{ExperimentConfig, Trainer};

fn main() -> sipl::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sipl-train-example"));

    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = epochs;
    cfg.train.eval_every = 5;
    cfg.out = out.clone();

    let mut trainer = Trainer::new(cfg)?;
    println!("{} parameters", trainer.state.store.num_scalars());
    for r in trainer.run()? {
        let dsc = r.val_dsc.map_or(String::new(), |d| format!("  val DSC {d:.3}"));
        println!(
            "epoch {:>3}  lr {:.4}  seg {:.4}  total {:.4}{dsc}",
            r.epoch, r.lr, r.seg, r.total
        );
    }
    println!("metrics and checkpoint in {}", out.display());
    Ok(())
}
