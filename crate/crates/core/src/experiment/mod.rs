//! Reproducible experiments: config text, training, evaluation, sweeps and
//! gradient checks. The command-line runner is a thin layer over the `cmd_*`
//! functions here.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod eval;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, thread_limit, AblationRow, Component,
    GradcheckSummary, Sweep,
};
pub use config::{ExperimentConfig, Split};
pub use eval::{evaluate_samples, EvalRow, EvalTable};
pub use train::{build_split, learning_rate, EpochRecord, Trainer};
