//! Per-channel z-score normalization fit on the training partition.

use serde::{Deserialize, Serialize};

use super::{PreprocessError, TimeSeriesFrame};
use crate::diffcore::Tensor;

/// Floor applied to a channel's standard deviation.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at [`NORM_EPS`].
    pub std: Vec<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Population mean and std of every channel of `train`.
pub fn fit_norm(train: &TimeSeriesFrame) -> NormStats {
    let mut stats = NormStats {
        names: Vec::new(),
        mean: Vec::new(),
        std: Vec::new(),
        warnings: Vec::new(),
    };
    for c in train.channels() {
        let n = c.values.len() as f64;
        let mu = c.values.iter().sum::<f64>() / n;
        let var = c.values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let mut sd = var.sqrt();
        if sd < NORM_EPS {
            stats
                .warnings
                .push(format!("channel `{}` is (near) constant; std floored at {NORM_EPS}", c.name));
            sd = NORM_EPS;
        }
        stats.names.push(c.name.clone());
        stats.mean.push(mu);
        stats.std.push(sd);
    }
    stats
}

impl NormStats {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn check_frame(&self, frame: &TimeSeriesFrame) -> Result<(), PreprocessError> {
        for c in frame.channels() {
            if self.index_of(&c.name).is_none() {
                return Err(PreprocessError::MissingColumn(c.name.clone()));
            }
        }
        Ok(())
    }

    /// Normalizes every channel of `frame` by name.
    pub fn apply_frame(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame, PreprocessError> {
        self.check_frame(frame)?;
        let idx: Vec<usize> = frame.channels().iter().map(|c| self.index_of(&c.name).expect("checked")).collect();
        Ok(frame.map_channels(|i, v| {
            let (m, s) = (self.mean[idx[i]], self.std[idx[i]]);
            v.iter().map(|x| (x - m) / s).collect()
        }))
    }

    pub fn invert_frame(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame, PreprocessError> {
        self.check_frame(frame)?;
        let idx: Vec<usize> = frame.channels().iter().map(|c| self.index_of(&c.name).expect("checked")).collect();
        Ok(frame.map_channels(|i, v| {
            let (m, s) = (self.mean[idx[i]], self.std[idx[i]]);
            v.iter().map(|x| x * s + m).collect()
        }))
    }

    /// Normalizes the last axis of `x`, whose entries are the channels `columns`.
    pub fn apply(&self, x: &Tensor, columns: &[usize]) -> Tensor {
        let d = columns.len();
        assert_eq!(*x.shape().last().expect("rank >= 1"), d, "column count mismatch");
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = columns[i % d];
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }

    pub fn invert(&self, x: &Tensor, columns: &[usize]) -> Tensor {
        let d = columns.len();
        assert_eq!(*x.shape().last().expect("rank >= 1"), d, "column count mismatch");
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = columns[i % d];
            *v = *v * self.std[c] + self.mean[c];
        }
        out
    }

    pub fn denorm_value(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }

    /// A Gaussian's scale only picks up the multiplicative part.
    pub fn denorm_std(&self, channel: usize, s: f64) -> f64 {
        s * self.std[channel]
    }
}
