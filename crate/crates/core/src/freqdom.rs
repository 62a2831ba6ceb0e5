//! Learnable spectral filtering: `Re(ifft(M ⊙ fft(h)))` along time with a
//! complex mask whose per-bin magnitude is clipped to a gain bound `G_f`.
//!
//! The mask is not constrained to be conjugate-symmetric, so the inverse
//! transform can carry an imaginary part; it is dropped. Dropping it keeps
//! the map real-linear and never increases the norm, so the `G_f`-Lipschitz
//! bound (under the unscaled-forward / `1/T`-inverse convention) still holds.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::params::{uniform, Bound, Linear, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FreqError {
    #[error("mask covers {mask} bins but the sequence has {len} steps")]
    LengthMismatch { mask: usize, len: usize },
    #[error("segment length {segment} does not divide sequence length {len}")]
    Segment { segment: usize, len: usize },
    #[error("at least one window configuration is required")]
    NoConfigs,
    #[error("mixing weights: expected {expected}, got {got}")]
    Weights { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub const DEFAULT_GAIN_BOUND: f64 = 2.0;
pub const DEFAULT_LAMBDA_SMOOTH: f64 = 1e-3;
pub const DEFAULT_LAMBDA_SPARSE: f64 = 1e-4;

/// Rescales any bin with `|m| > gain` onto the circle of radius `gain`,
/// keeping its phase. Bins within rounding of the bound are left alone so a
/// second pass is a no-op.
pub fn project_mask(real: &mut [f64], imag: &mut [f64], gain: f64) {
    assert!(gain > 0.0, "gain bound must be positive");
    let slack = gain * (1.0 + 4.0 * f64::EPSILON);
    for (r, i) in real.iter_mut().zip(imag.iter_mut()) {
        let m = r.hypot(*i);
        if m > slack {
            let s = gain / m;
            *r *= s;
            *i *= s;
        }
    }
}

/// `λ_smooth Σ (|m_{ω+1}| - |m_ω|)² + λ_sparse Σ |m_ω|` over `(bins, d)` planes,
/// differences taken along the bin axis per feature.
pub fn spectral_regularizer(real: &Tensor, imag: &Tensor, lambda_smooth: f64, lambda_sparse: f64) -> f64 {
    let (bins, d) = (real.shape()[0], real.numel() / real.shape()[0]);
    let mag: Vec<f64> = real.data().iter().zip(imag.data()).map(|(r, i)| r.hypot(*i)).collect();
    let mut smooth = 0.0;
    for w in 1..bins {
        for c in 0..d {
            smooth += (mag[w * d + c] - mag[(w - 1) * d + c]).powi(2);
        }
    }
    lambda_smooth * smooth + lambda_sparse * mag.iter().sum::<f64>()
}

/// Graph form of [`spectral_regularizer`].
pub fn spectral_regularizer_var(
    g: &mut Graph,
    real: Var,
    imag: Var,
    lambda_smooth: f64,
    lambda_sparse: f64,
) -> Result<Var, DiffError> {
    let bins = g.shape(real)[0];
    let mag = g.complex_abs(real, imag)?;
    let sparse = g.sum(mag);
    let sparse = g.scale(sparse, lambda_sparse);
    if bins < 2 {
        return Ok(sparse);
    }
    let hi = g.slice(mag, 0, 1, bins - 1)?;
    let lo = g.slice(mag, 0, 0, bins - 1)?;
    let diff = g.sub(hi, lo)?;
    let sq = g.square(diff);
    let smooth = g.sum(sq);
    let smooth = g.scale(smooth, lambda_smooth);
    g.add(smooth, sparse)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    #[default]
    Rect,
    Hann,
    Hamming,
}

impl WindowFn {
    /// Periodic window of length `n`.
    pub fn values(self, n: usize) -> Vec<f64> {
        let tau = 2.0 * std::f64::consts::PI;
        (0..n)
            .map(|i| {
                let c = (tau * i as f64 / n as f64).cos();
                match self {
                    WindowFn::Rect => 1.0,
                    WindowFn::Hann => 0.5 - 0.5 * c,
                    WindowFn::Hamming => 0.54 - 0.46 * c,
                }
            })
            .collect()
    }
}

/// One analysis configuration: a taper and an optional segment length that
/// splits the window into equal, separately transformed pieces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window: WindowFn,
    #[serde(default)]
    pub segment: Option<usize>,
}

/// A learnable mask for one configuration.
#[derive(Clone, Debug)]
pub struct SpectralFilter {
    pub real: ParamId,
    pub imag: ParamId,
    pub gain: f64,
    pub bins: usize,
    pub config: WindowConfig,
}

impl SpectralFilter {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        len: usize,
        d: usize,
        gain: f64,
        config: WindowConfig,
    ) -> Result<Self, FreqError> {
        let bins = config.segment.unwrap_or(len);
        if bins == 0 || len % bins != 0 {
            return Err(FreqError::Segment { segment: bins, len });
        }
        Ok(Self {
            real: store.add(format!("{name}.mask_re"), uniform(rng, &[bins, d], 0.1)),
            imag: store.add(format!("{name}.mask_im"), uniform(rng, &[bins, d], 0.1)),
            gain,
            bins,
            config,
        })
    }

    /// Filtered sequence (the caller adds any residual).
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, FreqError> {
        let s = g.shape(h).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        if self.config.segment.is_none() && l != self.bins {
            return Err(FreqError::LengthMismatch { mask: self.bins, len: l });
        }
        if l % self.bins != 0 {
            return Err(FreqError::Segment { segment: self.bins, len: l });
        }
        let pieces = l / self.bins;
        let x = if pieces == 1 { h } else { g.reshape(h, &[b * pieces, self.bins, d])? };
        let x = if self.config.window == WindowFn::Rect {
            x
        } else {
            let w = self.config.window.values(self.bins);
            let n = b * pieces;
            let taper = g.constant(Tensor::from_fn(&[n, self.bins, d], |i| w[(i / d) % self.bins]));
            g.mul(x, taper)?
        };
        let y = g.spectral_filter(x, p.var(self.real), p.var(self.imag))?;
        Ok(if pieces == 1 { y } else { g.reshape(y, &[b, l, d])? })
    }

    /// Clips the stored mask to the gain bound.
    pub fn project(&self, store: &mut ParamStore) {
        let mut re = store.get(self.real).clone();
        let mut im = store.get(self.imag).clone();
        project_mask(re.data_mut(), im.data_mut(), self.gain);
        *store.get_mut(self.real) = re;
        *store.get_mut(self.imag) = im;
    }

    pub fn regularizer_var(&self, g: &mut Graph, p: &Bound, smooth: f64, sparse: f64) -> Result<Var, DiffError> {
        spectral_regularizer_var(g, p.var(self.real), p.var(self.imag), smooth, sparse)
    }
}

/// One or more filters; with several, outputs are mixed by
/// `π = softmax(g_s(mean_t h))`.
#[derive(Clone, Debug)]
pub struct FrequencyBlock {
    pub filters: Vec<SpectralFilter>,
    pub score: Option<Linear>,
}

impl FrequencyBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        len: usize,
        d: usize,
        gain: f64,
        configs: &[WindowConfig],
    ) -> Result<Self, FreqError> {
        if configs.is_empty() {
            return Err(FreqError::NoConfigs);
        }
        let filters = configs
            .iter()
            .enumerate()
            .map(|(i, c)| SpectralFilter::new(store, &format!("{name}.s{i}"), rng, len, d, gain, *c))
            .collect::<Result<Vec<_>, _>>()?;
        let score = (filters.len() > 1).then(|| Linear::new(store, &format!("{name}.score"), rng, d, filters.len(), true));
        Ok(Self { filters, score })
    }

    /// Mixing weights `(B, S)`.
    pub fn weights(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, DiffError> {
        let b = g.shape(h)[0];
        match &self.score {
            None => Ok(g.constant(Tensor::full(&[b, 1], 1.0))),
            Some(score) => {
                let pooled = g.mean_axis(h, 1)?;
                let s = score.forward(g, p, pooled)?;
                Ok(g.softmax(s))
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, FreqError> {
        if self.filters.len() == 1 {
            return self.filters[0].forward(g, p, h);
        }
        let pi = self.weights(g, p, h)?;
        self.mix(g, p, h, pi)
    }

    /// Mixture with the same fixed weights for every sequence.
    pub fn forward_frozen(&self, g: &mut Graph, p: &Bound, h: Var, pi: &[f64]) -> Result<Var, FreqError> {
        if pi.len() != self.filters.len() {
            return Err(FreqError::Weights {
                expected: self.filters.len(),
                got: pi.len(),
            });
        }
        let b = g.shape(h)[0];
        let w = g.constant(Tensor::from_fn(&[b, pi.len()], |i| pi[i % pi.len()]));
        self.mix(g, p, h, w)
    }

    fn mix(&self, g: &mut Graph, p: &Bound, h: Var, pi: Var) -> Result<Var, FreqError> {
        let s = g.shape(h).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut flat = Vec::with_capacity(self.filters.len());
        for f in &self.filters {
            let y = f.forward(g, p, h)?;
            flat.push(g.reshape(y, &[b, 1, l * d])?);
        }
        let stacked = g.concat(&flat, 1)?;
        let w = g.reshape(pi, &[b, 1, self.filters.len()])?;
        let y = g.bmm(w, stacked)?;
        Ok(g.reshape(y, &[b, l, d])?)
    }

    pub fn project(&self, store: &mut ParamStore) {
        self.filters.iter().for_each(|f| f.project(store));
    }

    pub fn regularizer_var(&self, g: &mut Graph, p: &Bound, smooth: f64, sparse: f64) -> Result<Var, DiffError> {
        let mut total = self.filters[0].regularizer_var(g, p, smooth, sparse)?;
        for f in &self.filters[1..] {
            let r = f.regularizer_var(g, p, smooth, sparse)?;
            total = g.add(total, r)?;
        }
        Ok(total)
    }
}
