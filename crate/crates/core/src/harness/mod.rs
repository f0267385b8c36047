//! Experiment orchestration, evaluation and metrics.

pub mod checks;
pub mod evaluate;
pub mod metrics;
pub mod suite;

pub use evaluate::{evaluate, evaluate_tabular, GoalEnv};
pub use metrics::{MetricsRecord, RunLabels};
pub use suite::{run_all, run_manifest, run_suite, ExperimentConfig, Manifest, ResultsTree, SuiteKind};
