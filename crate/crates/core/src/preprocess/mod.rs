//! Data ingestion and preparation: CSV frames, chronological splits,
//! sliding windows, train-fit normalization and synthetic data.

mod frame;
mod norm;
mod synth;
mod windows;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frame::{ingest_csv, read_csv, write_csv, Channel, CsvSchema, MissingPolicy, TimeSeriesFrame, Timestamp};
pub use norm::{fit_norm, NormStats, NORM_EPS};
pub use synth::{synth_generate, Coupling, NoiseSpec, SeasonSpec, SynthSpec};
pub use windows::{chronological_split, make_windows, split_bounds, WindowBatch};

/// Source family of a channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Surveillance,
    Trends,
    Weather,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Surveillance, Modality::Trends, Modality::Weather];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Surveillance => "surveillance",
            Modality::Trends => "trends",
            Modality::Weather => "weather",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "surveillance" | "flu" => Some(Modality::Surveillance),
            "trends" | "search" => Some(Modality::Trends),
            "weather" | "meteo" => Some(Modality::Weather),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("non-numeric value `{value}` in column `{column}` at data row {row}")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("unparseable timestamp `{value}` at data row {row}")]
    BadTimestamp { row: usize, value: String },
    #[error("timestamps not strictly increasing at data row {row}")]
    NonMonotonic { row: usize },
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("channel `{name}` has {len} values, expected {expected}")]
    LengthMismatch { name: String, len: usize, expected: usize },
    #[error("target `{0}` must be a surveillance channel")]
    TargetModality(String),
    #[error("invalid split fractions {0:?}")]
    Fractions(Vec<f64>),
    #[error("{partition} partition has {len} rows but window length + horizon is {needed}")]
    PartitionTooShort {
        partition: &'static str,
        len: usize,
        needed: usize,
    },
    #[error("series of length {len} is shorter than window {window} + horizon {horizon}")]
    TooShort { len: usize, window: usize, horizon: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}
