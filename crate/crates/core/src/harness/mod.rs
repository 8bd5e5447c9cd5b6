//! Experiment orchestration: configuration, training, evaluation, comparison and plots.

pub mod compare;
pub mod config;
pub mod evaluate;
pub mod plots;
pub mod train;

pub use compare::{compare_runs, ComparisonReport, ComparisonRow};
pub use config::{AugmentationSpec, DataSource, ExperimentConfig, TrainingMode};
pub use evaluate::{evaluate, evaluate_run, EvaluationReport, MetricTables, StyleMetrics};
pub use plots::{emit_plots, replot, BoxStats, PlotValues};
pub use train::{load_trained, train, RunRecord, TrainedRun};
