//! Command-line runner.
//!
//! Exit codes: 0 success, 1 validation failure, 2 config error, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sipl::experiment::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, thread_limit, ExperimentConfig, Sweep,
};
use sipl::{Error, Result};

// the system allocator hands large tensor buffers back to the kernel after
// every step; mimalloc keeps them
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "sipl",
    version,
    about = "Prototype segmentation experiments on synthetic phantoms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint, writing eval.csv and eval.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by gen-data; defaults to the held-out split.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate one run per sweep setting.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// e.g. `tau=0.3,0.5,0.8`, `clusters=8,16,32`,
        /// `scales=32;16;8;32,16,8`, `component=full,-ipl,-smg`.
        #[arg(long)]
        sweep: String,
    },
    /// Finite-difference check of every parameter gradient on a tiny volume.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb the backward pass (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Write the train and held-out phantoms as volume files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common, base: ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let mut c = base;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", p.display(), n + 1)))?;
                c.set(k.trim(), v.trim())?;
            }
            c
        }
        None => base,
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = load(&common, ExperimentConfig::default())?;
            let history = cmd_train(cfg, resume.as_deref())?;
            if let Some(r) = history.last() {
                println!(
                    "epoch {} total loss {:.6} held-out DSC {}",
                    r.epoch,
                    r.total,
                    r.val_dsc.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
            Ok(true)
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
        } => {
            let cfg = load(&common, ExperimentConfig::default())?;
            let table = cmd_eval(&checkpoint, dataset.as_deref(), &cfg.out)?;
            println!("{} samples, mean DSC {:.4}", table.rows.len(), table.aggregate.avg);
            Ok(true)
        }
        Command::Ablate { common, sweep } => {
            let cfg = load(&common, ExperimentConfig::default())?;
            let sweep: Sweep = sweep.parse()?;
            for r in cmd_ablate(&cfg, &sweep, thread_limit())? {
                println!("{:<10} {:<16} mean DSC {:.4}", r.sweep, r.setting, r.mean_dsc);
            }
            Ok(true)
        }
        Command::Gradcheck {
            common,
            corrupt_backward,
        } => {
            let cfg = load(&common, ExperimentConfig::tiny())?;
            let summary = cmd_gradcheck(&cfg, corrupt_backward)?;
            println!("{summary}");
            Ok(summary.passed())
        }
        Command::GenData { common } => {
            let cfg = load(&common, ExperimentConfig::default())?;
            let files = cmd_gen_data(&cfg)?;
            println!("wrote {} files under {}", files.len(), cfg.out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
