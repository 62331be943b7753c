//! Decoding, scoring and the experiment grid.

mod cer;
mod decode;
mod experiment;
mod report;

pub use cer::{cer, corpus_cer, levenshtein};
pub use decode::{decode, greedy_ctc_decode, prefix_beam_candidates, prefix_beam_decode, DecodeConfig, DecodeMode};
pub use experiment::{
    evaluate, evaluate_set, expansion_cells, run_expansion, run_experiment, write_experiment, ExperimentError,
    ExperimentReport, ExperimentRun, ReportRow, RowKind, Scores, TimingRow,
};
pub use report::{render_report, ReportFormat, COLUMNS};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

#[cfg(test)]
mod tests;
