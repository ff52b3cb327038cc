//! Training loop, optimiser, checkpoints, evaluation tables, the ablation
//! grid and the gradient verification suite.

mod ablate;
mod checkpoint;
mod config;
mod evaluate;
pub mod gradcheck;
mod optim;
mod train;

pub use ablate::{
    ablate, ablate_variants, ablation_seeds, AblationReport, CellSummary, FailedCell,
    SUMMARY_HEADER,
};
pub use checkpoint::{parameter_checksum, Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use config::{OptimizerKind, TrainConfig, Variant};
pub use evaluate::{
    eval_threads, evaluate, evaluate_model, evaluate_with_threads, occlude_queries, rows_to_csv,
    variant_label, write_csv, MetricsRow, CSV_HEADER,
};
pub use optim::Optimizer;
pub use train::{
    train, train_on, EpochSummary, StepReport, TrainOutcome, Trainer, TrainingLog, ENTROPY_BINS,
};
