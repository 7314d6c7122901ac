//! Writes a small 32^3 dataset to disk, trains briefly (under a minute in
//! release mode), then scores the checkpoint on the stored volumes.

use sipl::experiment::{cmd_eval, cmd_gen_data, ExperimentConfig, Trainer};

fn main() -> sipl::Result<()> {
    let root = std::env::temp_dir().join("sipl-eval-example");
    let mut cfg = ExperimentConfig::default();
    cfg.data.train = 8;
    cfg.data.val = 2;
    cfg.train.epochs = 30;
    cfg.out = root.join("data");
    let files = cmd_gen_data(&cfg)?;
    println!("wrote {} volume files", files.len());

    cfg.out = root.join("run");
    Trainer::new(cfg.clone())?.run()?;

    let table = cmd_eval(
        &cfg.out.join("checkpoint.bin"),
        Some(&root.join("data/val")),
        &root.join("eval"),
    )?;
    println!("{}", table.header().join("\t"));
    for row in table.rows.iter().chain([&table.aggregate]) {
        let cells: Vec<String> = row
            .per_class
            .iter()
            .chain([&row.avg])
            .map(|v| format!("{v:.3}"))
            .collect();
        println!("{}\t{}", row.id, cells.join("\t"));
    }
    Ok(())
}
