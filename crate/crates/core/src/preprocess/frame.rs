//! Aligned multi-modal frames and their CSV form.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{Modality, PreprocessError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timestamp {
    Index(i64),
    Date(NaiveDate),
    DateTime(NaiveDateTime),
}

const DATETIME_FORMATS: [&str; 2] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"];

impl Timestamp {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<i64>() {
            return Some(Timestamp::Index(i));
        }
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Some(Timestamp::Date(d));
        }
        DATETIME_FORMATS
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
            .map(Timestamp::DateTime)
    }

    fn same_kind(&self, other: &Self) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }

    /// `self + k * (self - prev)`, used to label steps past the end of data.
    pub fn extrapolate(prev: &Timestamp, last: &Timestamp, k: i64) -> Timestamp {
        match (prev, last) {
            (Timestamp::Index(a), Timestamp::Index(b)) => Timestamp::Index(b + k * (b - a)),
            (Timestamp::Date(a), Timestamp::Date(b)) => Timestamp::Date(*b + Duration::days(k * (*b - *a).num_days())),
            (Timestamp::DateTime(a), Timestamp::DateTime(b)) => {
                Timestamp::DateTime(*b + Duration::seconds(k * (*b - *a).num_seconds()))
            }
            _ => *last,
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Index(i) => write!(f, "{i}"),
            Timestamp::Date(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            Timestamp::DateTime(d) => write!(f, "{}", d.format("%Y-%m-%dT%H:%M:%S")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub name: String,
    pub modality: Modality,
    pub values: Vec<f64>,
}

/// Time-aligned channels sharing one timestamp axis.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesFrame {
    timestamps: Vec<Timestamp>,
    channels: Vec<Channel>,
    target: usize,
    /// Row offset of this frame inside the frame it was sliced from.
    origin: usize,
    notes: Vec<String>,
}

impl TimeSeriesFrame {
    pub fn new(timestamps: Vec<Timestamp>, channels: Vec<Channel>, target: &str) -> Result<Self, PreprocessError> {
        let t = timestamps.len();
        if t < 2 {
            return Err(PreprocessError::TooFewRows(t));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if !w[0].same_kind(&w[1]) || w[1] <= w[0] {
                return Err(PreprocessError::NonMonotonic { row: i + 1 });
            }
        }
        for c in &channels {
            if c.values.len() != t {
                return Err(PreprocessError::LengthMismatch {
                    name: c.name.clone(),
                    len: c.values.len(),
                    expected: t,
                });
            }
        }
        let target_idx = channels
            .iter()
            .position(|c| c.name == target)
            .ok_or_else(|| PreprocessError::MissingColumn(target.to_string()))?;
        if channels[target_idx].modality != Modality::Surveillance {
            return Err(PreprocessError::TargetModality(target.to_string()));
        }
        Ok(Self {
            timestamps,
            channels,
            target: target_idx,
            origin: 0,
            notes: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn target(&self) -> &Channel {
        &self.channels[self.target]
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    /// Ingest and preprocessing decisions, kept as run metadata.
    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn add_note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Rows `start..end`, remembering the offset.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.len(), "slice {start}..{end} of {}", self.len());
        Self {
            timestamps: self.timestamps[start..end].to_vec(),
            channels: self
                .channels
                .iter()
                .map(|c| Channel {
                    name: c.name.clone(),
                    modality: c.modality,
                    values: c.values[start..end].to_vec(),
                })
                .collect(),
            target: self.target,
            origin: self.origin + start,
            notes: self.notes.clone(),
        }
    }

    /// Same structure with every channel passed through `f(channel_index, values)`.
    pub fn map_channels(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Self {
        let mut out = self.clone();
        for (i, c) in out.channels.iter_mut().enumerate() {
            c.values = f(i, &c.values);
        }
        out
    }

    /// Timestamp `k` steps after the last row (k >= 1), by constant spacing.
    pub fn future_timestamp(&self, k: usize) -> Timestamp {
        let n = self.len();
        Timestamp::extrapolate(&self.timestamps[n - 2], &self.timestamps[n - 1], k as i64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Discard any row with a missing cell.
    Drop,
    /// Copy the previous row's value; leading gaps are dropped.
    #[default]
    ForwardFill,
}

/// Which columns to read and how.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub columns: Vec<(String, Modality)>,
    pub target: String,
    pub missing: MissingPolicy,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "nan" | "na" | "null")
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeriesFrame, PreprocessError> {
    read_csv(File::open(path)?, schema)
}

/// Parses CSV whose first column is the timestamp.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TimeSeriesFrame, PreprocessError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = schema
        .columns
        .iter()
        .map(|(name, _)| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PreprocessError::MissingColumn(name.clone()))
        })
        .collect::<Result<_, _>>()?;

    let mut stamps = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let ts_cell = rec.get(0).unwrap_or("");
        let ts = Timestamp::parse(ts_cell).ok_or_else(|| PreprocessError::BadTimestamp {
            row: r + 1,
            value: ts_cell.to_string(),
        })?;
        let mut row = Vec::with_capacity(idx.len());
        for (&ci, (name, _)) in idx.iter().zip(&schema.columns) {
            let cell = rec.get(ci).unwrap_or("");
            if is_missing(cell) {
                row.push(None);
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| PreprocessError::NonNumeric {
                row: r + 1,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(PreprocessError::NonNumeric {
                    row: r + 1,
                    column: name.clone(),
                    value: cell.to_string(),
                });
            }
            row.push(Some(v));
        }
        stamps.push(ts);
        rows.push(row);
    }
    for (i, w) in stamps.windows(2).enumerate() {
        if !w[0].same_kind(&w[1]) || w[1] <= w[0] {
            return Err(PreprocessError::NonMonotonic { row: i + 2 });
        }
    }

    let mut notes = Vec::new();
    let mut keep_ts = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); idx.len()];
    let mut dropped = 0usize;
    let mut filled = 0usize;
    let mut last: Vec<Option<f64>> = vec![None; idx.len()];
    for (ts, row) in stamps.into_iter().zip(rows) {
        let complete = row.iter().all(Option::is_some);
        match schema.missing {
            MissingPolicy::Drop if !complete => {
                dropped += 1;
                continue;
            }
            MissingPolicy::ForwardFill if !complete => {
                if row.iter().zip(&last).any(|(c, l)| c.is_none() && l.is_none()) {
                    dropped += 1;
                    continue;
                }
                filled += row.iter().filter(|c| c.is_none()).count();
            }
            _ => {}
        }
        for (j, cell) in row.into_iter().enumerate() {
            let v = cell.or(last[j]).expect("checked above");
            last[j] = Some(v);
            cols[j].push(v);
        }
        keep_ts.push(ts);
    }
    if dropped > 0 {
        notes.push(format!("dropped {dropped} rows with missing cells ({:?})", schema.missing));
    }
    if filled > 0 {
        notes.push(format!("forward-filled {filled} missing cells"));
    }

    let channels = schema
        .columns
        .iter()
        .zip(cols)
        .map(|((name, m), values)| Channel {
            name: name.clone(),
            modality: *m,
            values,
        })
        .collect();
    let mut frame = TimeSeriesFrame::new(keep_ts, channels, &schema.target)?;
    for n in notes {
        frame.add_note(n);
    }
    Ok(frame)
}

/// Writes `timestamp,<channels...>`; floats use the shortest exact form.
pub fn write_csv<W: Write>(frame: &TimeSeriesFrame, writer: W) -> Result<(), PreprocessError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(frame.channels().iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for (t, ts) in frame.timestamps().iter().enumerate() {
        let mut rec = vec![ts.to_string()];
        rec.extend(frame.channels().iter().map(|c| c.values[t].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
