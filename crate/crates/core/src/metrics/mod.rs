//! Reference implementations of WER and chrF, plus score-table rendering.

mod chrf;
mod table;
mod wer;

pub use chrf::{chrf, chrf_stats, ChrfScore, ChrfStats, NgramCounts};
pub use table::{emit_score_table, Better, ScoreColumn, ScoreRow, ScoreTable, TableFormat};
pub use wer::{align_counts, normalize_for_wer, wer, NormalizationProfile, WerBreakdown};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference is empty after normalization")]
    EmptyReference,
    #[error("invalid metric parameter: {0}")]
    InvalidParams(String),
    #[error("row {row} has {found} values, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
}
