//! Data ingestion, run configuration, experiment orchestration and export.

pub mod config;
pub mod data;
pub mod experiment;
pub mod export;

pub use config::RunConfig;
pub use data::{load_and_split, load_dataset, split_tasks, DataSource, Dataset, DatasetDescriptor};
pub use experiment::{
    evaluate_checkpoint, grid_from_checkpoint, run_experiment, run_strategy, sweep, ExperimentOutcome, Manifest,
    SeedContext,
};
pub use export::{
    append_metrics, emit_plots, export_sample_grid, read_metrics, summarize, MetricsRow, SummaryRow, METRICS_HEADER,
};
