//! Experiment orchestration: config, bounded-parallel scoring with cache and
//! resume, analytic re-generation, and report files.

mod config;
mod report;
mod run;
mod traces;

use std::path::Path;

use thiserror::Error;

pub use config::{
    BackendConfig, BackendKind, Backends, CaseStudyEntry, ConfigError, DatasetConfig, ExperimentConfig, ExternalRow,
    RegenConfig, StrategyEntry, StrategyLabels,
};
pub use report::{
    build_report, case_study_markdown, cost_accuracy_csv, emit_report, paired_scores, results_markdown,
    strategy_report, table_row, CostSummary, EvaluationReport, StrategyReport,
};
pub use run::{
    build_index_file, instruction_rows, load_dataset, rebuild_report, run_bounded, run_experiment,
    run_regeneration, score_one, IngestSummary, InstructionRow, LoadedDataset, RegenSummary, RejectedRecord,
    RunMeta, RunOptions, RunOutcome,
};
pub use traces::{append_failure, is_complete, FailureRecord, TraceStore};

use crate::dataset::DatasetError;
use crate::prompting::RenderError;
use crate::retrieval::RetrievalError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Render(RenderError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no essay with id `{0}` in either split")]
    UnknownEssay(String),
}

impl RunError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io { path: path.display().to_string(), source }
    }
}
