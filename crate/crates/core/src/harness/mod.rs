//! Experiment orchestration: configs, runs, checkpoints, metrics files and sweeps.

mod checkpoint;
mod config;
mod metrics;
mod run;
mod sweep;

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use config::{
    DataConfig, EvalConfig, ExperimentConfig, IdxPaths, LrSchedule, OptimizerConfig, Precision, SyntheticData,
    LINEAR_SCALING_BASE, SCHEMA_VERSION,
};
pub use metrics::{
    oscillation_score, MetricsFile, MetricsHeader, MetricsRecord, MetricsWriter, RowKind, COLUMNS,
    OSCILLATION_DIVERGENCE, OSCILLATION_WINDOW,
};
pub use run::{
    encoder_from_checkpoint, load_data, resume_experiment, run_experiment, run_from, AnyMechanism, RunStatus,
    RunSummary, Start, Trainer, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE,
};
pub use sweep::{
    ablate_shuffle_bn, leakage_curves, plan_sweep_k, run_cells, sweep_k, sweep_momentum, Ablation, Axis, Cell,
    Manifest, SweepTable, TableRow, CURVES_FILE, MANIFEST_FILE, TABLE_FILE,
};
