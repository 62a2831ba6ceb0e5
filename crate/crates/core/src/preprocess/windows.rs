//! Chronological splitting and sliding-window extraction.

use super::{PreprocessError, TimeSeriesFrame};
use crate::diffcore::Tensor;

/// Inputs `(B, L, D)`, targets `(B, H)` and each window's first row index
/// in the original (unsplit) frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn window(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[1]
    }

    /// Gathers the given windows, in the given order.
    pub fn select(&self, rows: &[usize]) -> WindowBatch {
        let (l, d, h) = (self.inputs.shape()[1], self.inputs.shape()[2], self.horizon());
        let mut x = Vec::with_capacity(rows.len() * l * d);
        let mut y = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            x.extend_from_slice(&self.inputs.data()[r * l * d..(r + 1) * l * d]);
            y.extend_from_slice(&self.targets.data()[r * h..(r + 1) * h]);
        }
        WindowBatch {
            inputs: Tensor::new(vec![rows.len(), l, d], x).expect("gathered shape"),
            targets: Tensor::new(vec![rows.len(), h], y).expect("gathered shape"),
            starts: rows.iter().map(|&r| self.starts[r]).collect(),
        }
    }
}

/// Partition boundaries `[0, b1, b2, T]` with `b = floor(cumulative fraction * T)`.
pub fn split_bounds(t: usize, fractions: &[f64]) -> Result<Vec<usize>, PreprocessError> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(PreprocessError::Fractions(fractions.to_vec()));
    }
    let mut bounds = vec![0];
    let mut acc = 0.0;
    for &f in &fractions[..fractions.len() - 1] {
        acc += f;
        // the nudge keeps e.g. 0.6 + 0.2 from flooring 80 down to 79
        bounds.push(((acc * t as f64) + 1e-9).floor() as usize);
    }
    bounds.push(t);
    Ok(bounds)
}

/// Train/validation/test partitions, each at least `min_len` rows long.
pub fn chronological_split(
    frame: &TimeSeriesFrame,
    fractions: (f64, f64, f64),
    min_len: usize,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame, TimeSeriesFrame), PreprocessError> {
    let b = split_bounds(frame.len(), &[fractions.0, fractions.1, fractions.2])?;
    let names = ["train", "validation", "test"];
    for i in 0..3 {
        let len = b[i + 1] - b[i];
        if len < min_len.max(1) {
            return Err(PreprocessError::PartitionTooShort {
                partition: names[i],
                len,
                needed: min_len,
            });
        }
    }
    Ok((frame.slice(b[0], b[1]), frame.slice(b[1], b[2]), frame.slice(b[2], b[3])))
}

/// Sliding windows over `input_channels` with the frame's target as label.
pub fn make_windows(
    frame: &TimeSeriesFrame,
    input_channels: &[usize],
    window: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowBatch, PreprocessError> {
    let t = frame.len();
    if window == 0 || horizon == 0 || stride == 0 || input_channels.is_empty() {
        return Err(PreprocessError::Invalid(
            "window, horizon, stride and channel list must be non-empty".into(),
        ));
    }
    if t < window + horizon {
        return Err(PreprocessError::TooShort {
            len: t,
            window,
            horizon,
        });
    }
    if let Some(&bad) = input_channels.iter().find(|&&c| c >= frame.channels().len()) {
        return Err(PreprocessError::Invalid(format!("channel index {bad} out of range")));
    }
    let count = (t - window - horizon) / stride + 1;
    let d = input_channels.len();
    let target = &frame.target().values;
    let mut x = Vec::with_capacity(count * window * d);
    let mut y = Vec::with_capacity(count * horizon);
    let mut starts = Vec::with_capacity(count);
    for w in 0..count {
        let s = w * stride;
        for step in s..s + window {
            for &c in input_channels {
                x.push(frame.channels()[c].values[step]);
            }
        }
        y.extend_from_slice(&target[s + window..s + window + horizon]);
        starts.push(frame.origin() + s);
    }
    Ok(WindowBatch {
        inputs: Tensor::new(vec![count, window, d], x).expect("window shape"),
        targets: Tensor::new(vec![count, horizon], y).expect("window shape"),
        starts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{Channel, Modality, Timestamp};

    fn ramp(t: usize) -> TimeSeriesFrame {
        TimeSeriesFrame::new(
            (0..t as i64).map(Timestamp::Index).collect(),
            vec![
                Channel {
                    name: "y".into(),
                    modality: Modality::Surveillance,
                    values: (1..=t).map(|v| v as f64).collect(),
                },
                Channel {
                    name: "x".into(),
                    modality: Modality::Weather,
                    values: (1..=t).map(|v| -(v as f64)).collect(),
                },
            ],
            "y",
        )
        .unwrap()
    }

    #[test]
    fn split_lengths() {
        let (a, b, c) = chronological_split(&ramp(100), (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        let (a, b, c) = chronological_split(&ramp(10), (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (6, 2, 2));
        assert_eq!((b.origin(), c.origin()), (6, 8));
        assert!(matches!(
            chronological_split(&ramp(10), (0.6, 0.2, 0.2), 31),
            Err(PreprocessError::PartitionTooShort { .. })
        ));
        assert!(chronological_split(&ramp(10), (0.6, 0.3, 0.2), 1).is_err());
    }

    #[test]
    fn window_counts_and_contents() {
        let f = ramp(10);
        let w = make_windows(&f, &[0], 3, 1, 1).unwrap();
        assert_eq!(w.len(), 7);
        assert_eq!(&w.inputs.data()[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(w.targets.data()[0], 4.0);
        assert_eq!(make_windows(&ramp(31), &[0], 30, 1, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&f, &[0, 1], 3, 2, 2).unwrap().len(), 3);
        assert!(make_windows(&f, &[0], 10, 1, 1).is_err());
    }

    #[test]
    fn select_gathers_rows() {
        let w = make_windows(&ramp(10), &[0, 1], 3, 1, 1).unwrap();
        let s = w.select(&[4, 1]);
        assert_eq!(s.starts, vec![4, 1]);
        assert_eq!(s.inputs.get(&[0, 0, 0]), 5.0);
        assert_eq!(s.inputs.get(&[1, 2, 1]), -4.0);
        assert_eq!(s.targets.data(), &[8.0, 5.0]);
    }
}
