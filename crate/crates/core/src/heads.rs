//! Horizon projection, the Gaussian output head, losses and metrics.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::params::{glorot, Bound, Linear, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("standard deviation must be positive, got {value} at index {index}")]
    NonPositiveStd { index: usize, value: f64 },
    #[error("{name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("need at least {needed} points, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("huber delta must be positive, got {0}")]
    HuberDelta(f64),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Floor added under the softplus so the predicted scale never reaches zero.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Linear map along time from `L` input steps to `H` output steps, with a
/// per-step bias. Features are untouched.
#[derive(Clone, Debug)]
pub struct TemporalProjection {
    pub w: ParamId,
    pub b: ParamId,
    pub horizon: usize,
    pub window: usize,
}

impl TemporalProjection {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, window: usize, horizon: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), glorot(rng, &[horizon, window], window, horizon)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[horizon])),
            horizon,
            window,
        }
    }

    /// `(B, L, d) -> (B, H, d)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, DiffError> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[1] != self.window {
            return Err(DiffError::ShapeMismatch {
                op: "temporal projection",
                lhs: s,
                rhs: vec![self.horizon, self.window],
            });
        }
        let x = g.permute(h, &[0, 2, 1])?;
        let wt = g.transpose(p.var(self.w))?;
        let y = g.matmul(x, wt)?;
        let y = g.add_row(y, p.var(self.b))?;
        g.permute(y, &[0, 2, 1])
    }
}

/// Per-step mean and (optionally) softplus scale from `(B, H, d)` features.
#[derive(Clone, Debug)]
pub struct UncertaintyHead {
    pub mean: Linear,
    pub scale: Option<Linear>,
}

impl UncertaintyHead {
    /// The scale starts at exactly 1 for every input: zero weights and a
    /// bias of softplus^-1(1). A random start can put some scales near the
    /// floor, and the resulting NLL spike wrecks the first updates.
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize, with_scale: bool) -> Self {
        let mean = Linear::new(store, &format!("{name}.mu"), rng, d, 1, true);
        let scale = with_scale.then(|| {
            let lin = Linear::new(store, &format!("{name}.sigma"), rng, d, 1, true);
            *store.get_mut(lin.w) = Tensor::zeros(&[d, 1]);
            *store.get_mut(lin.b.expect("sigma has a bias")) = Tensor::from_vec(vec![1f64.exp_m1().ln()]);
            lin
        });
        Self { mean, scale }
    }

    /// Returns `(mean (B, H), std (B, H))`; `std` is `None` for a plain head.
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<(Var, Option<Var>), DiffError> {
        let s = g.shape(h).to_vec();
        let out = &s[..s.len() - 1];
        let m = self.mean.forward(g, p, h)?;
        let m = g.reshape(m, out)?;
        let std = match &self.scale {
            None => None,
            Some(lin) => {
                let a = lin.forward(g, p, h)?;
                let a = g.reshape(a, out)?;
                let sp = g.softplus(a);
                Some(g.add_scalar(sp, SIGMA_FLOOR))
            }
        };
        Ok((m, std))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLoss {
    Mse,
    #[default]
    Huber,
}

pub fn huber_value(a: f64, delta: f64) -> f64 {
    if a.abs() <= delta {
        0.5 * a * a
    } else {
        delta * (a.abs() - 0.5 * delta)
    }
}

pub fn point_loss(kind: PointLoss, y: &[f64], yhat: &[f64], delta: f64) -> Result<f64, HeadError> {
    if y.len() != yhat.len() {
        return Err(HeadError::Length(y.len(), yhat.len()));
    }
    if delta <= 0.0 {
        return Err(HeadError::HuberDelta(delta));
    }
    let total: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| match kind {
            PointLoss::Mse => (a - b).powi(2),
            PointLoss::Huber => huber_value(a - b, delta),
        })
        .sum();
    Ok(total / y.len() as f64)
}

pub fn point_loss_var(g: &mut Graph, kind: PointLoss, y: Var, yhat: Var, delta: f64) -> Result<Var, DiffError> {
    let r = g.sub(yhat, y)?;
    let e = match kind {
        PointLoss::Mse => g.square(r),
        PointLoss::Huber => g.huber(r, delta),
    };
    Ok(g.mean(e))
}

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

/// Mean over steps of `0.5 ln(2 pi s^2) + (y - mu)^2 / (2 s^2)`.
pub fn nll_loss(y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64, HeadError> {
    if y.len() != mu.len() || y.len() != sigma.len() {
        return Err(HeadError::Length(y.len(), mu.len().min(sigma.len())));
    }
    if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
        return Err(HeadError::NonPositiveStd { index, value });
    }
    let total: f64 = y
        .iter()
        .zip(mu)
        .zip(sigma)
        .map(|((y, m), s)| HALF_LN_TAU + s.ln() + (y - m).powi(2) / (2.0 * s * s))
        .sum();
    Ok(total / y.len() as f64)
}

pub fn nll_loss_var(g: &mut Graph, y: Var, mu: Var, sigma: Var) -> Result<Var, DiffError> {
    let r = g.sub(y, mu)?;
    let r2 = g.square(r);
    let s2 = g.square(sigma);
    let s2 = g.scale(s2, 2.0);
    let q = g.div(r2, s2)?;
    let ls = g.log(sigma);
    let t = g.add(ls, q)?;
    let t = g.add_scalar(t, HALF_LN_TAU);
    Ok(g.mean(t))
}

/// Weights of the composite training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub point: f64,
    pub nll: f64,
    pub spectral: f64,
    pub weights: f64,
    pub stability: f64,
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            point: 1.0,
            nll: 0.1,
            spectral: 1.0,
            weights: 1.0,
            stability: 1.0,
            sigma: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), HeadError> {
        let named = [
            ("lambda_point", self.point),
            ("lambda_nll", self.nll),
            ("lambda_spectral", self.spectral),
            ("lambda_weights", self.weights),
            ("lambda_stability", self.stability),
            ("lambda_sigma", self.sigma),
        ];
        for (name, value) in named {
            if !(value >= 0.0) {
                return Err(HeadError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Individual objective terms, kept for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub point: f64,
    pub nll: f64,
    pub spectral: f64,
    pub weights: f64,
    pub stability: f64,
    pub sigma_mean: f64,
}

impl LossTerms {
    pub fn add(&mut self, other: &LossTerms, scale: f64) {
        self.point += scale * other.point;
        self.nll += scale * other.nll;
        self.spectral += scale * other.spectral;
        self.weights += scale * other.weights;
        self.stability += scale * other.stability;
        self.sigma_mean += scale * other.sigma_mean;
    }
}

pub fn composite_objective(terms: &LossTerms, w: &LossWeights) -> Result<f64, HeadError> {
    w.validate()?;
    Ok(w.point * terms.point
        + w.nll * terms.nll
        + w.spectral * terms.spectral
        + w.weights * terms.weights
        + w.stability * terms.stability
        + w.sigma * terms.sigma_mean)
}

/// Graph terms; absent ones count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct TermVars {
    pub point: Option<Var>,
    pub nll: Option<Var>,
    pub spectral: Option<Var>,
    pub weights: Option<Var>,
    pub stability: Option<Var>,
    pub sigma_mean: Option<Var>,
}

impl TermVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossTerms {
            point: v(self.point),
            nll: v(self.nll),
            spectral: v(self.spectral),
            weights: v(self.weights),
            stability: v(self.stability),
            sigma_mean: v(self.sigma_mean),
        }
    }
}

pub fn composite_objective_var(g: &mut Graph, terms: &TermVars, w: &LossWeights) -> Result<Var, HeadError> {
    w.validate()?;
    let pairs = [
        (terms.point, w.point),
        (terms.nll, w.nll),
        (terms.spectral, w.spectral),
        (terms.weights, w.weights),
        (terms.stability, w.stability),
        (terms.sigma_mean, w.sigma),
    ];
    let mut total = g.constant(Tensor::scalar(0.0));
    for (term, lambda) in pairs {
        if let Some(t) = term {
            if lambda != 0.0 {
                let t = g.reshape(t, &[1])?;
                let s = g.scale(t, lambda);
                total = g.add(total, s)?;
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: f64,
    /// Targets equal to zero, left out of the MAPE mean.
    pub mape_excluded: usize,
    pub r2: f64,
    pub n: usize,
}

/// MAE, RMSE, MAPE (percent, zero targets excluded) and `R^2 = 1 - SSE/SST`.
/// With `SST = 0`, `R^2` is 1 for an exact fit and 0 otherwise.
pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics, HeadError> {
    if y.len() != yhat.len() {
        return Err(HeadError::Length(y.len(), yhat.len()));
    }
    let n = y.len();
    if n < 2 {
        return Err(HeadError::TooFew { needed: 2, got: n });
    }
    let nf = n as f64;
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / nf;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    let mean = y.iter().sum::<f64>() / nf;
    let sst: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    let (mut pct, mut used) = (0.0, 0usize);
    for (a, b) in y.iter().zip(yhat) {
        if *a != 0.0 {
            pct += ((a - b) / a).abs();
            used += 1;
        }
    }
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(Metrics {
        mae,
        rmse: (sse / nf).sqrt(),
        mape_pct: if used > 0 { 100.0 * pct / used as f64 } else { 0.0 },
        mape_excluded: n - used,
        r2,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub statistic: f64,
    pub critical: f64,
    pub alpha: f64,
    pub n: usize,
    pub pass: bool,
}

/// Asymptotic one-sample KS critical value `sqrt(-ln(alpha/2)/2) / sqrt(n)`.
pub fn ks_critical(alpha: f64, n: usize) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// One-sample KS statistic of `z` against the standard normal.
pub fn ks_statistic(z: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut s = z.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// KS test of the standardized residuals `(y - mu) / sigma`.
pub fn calibration_check(y: &[f64], mu: &[f64], sigma: &[f64], alpha: f64) -> Result<Calibration, HeadError> {
    if y.len() != mu.len() || y.len() != sigma.len() {
        return Err(HeadError::Length(y.len(), mu.len().min(sigma.len())));
    }
    if y.len() < 30 {
        return Err(HeadError::TooFew { needed: 30, got: y.len() });
    }
    if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
        return Err(HeadError::NonPositiveStd { index, value });
    }
    let z: Vec<f64> = y.iter().zip(mu).zip(sigma).map(|((y, m), s)| (y - m) / s).collect();
    let statistic = ks_statistic(&z);
    let critical = ks_critical(alpha, z.len());
    Ok(Calibration {
        statistic,
        critical,
        alpha,
        n: z.len(),
        pass: statistic < critical,
    })
}

/// Point forecast with its scale for one window, in data units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    pub window_id: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}
