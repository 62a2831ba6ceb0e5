//! Additive trend/seasonal split by an edge-replicated centered moving average.

use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("moving-average kernel must be odd, got {0}")]
    EvenKernel(usize),
    #[error("moving-average kernel {kernel} exceeds series length {len}")]
    KernelTooLong { kernel: usize, len: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompOutput {
    pub trend: Tensor,
    pub seasonal: Tensor,
}

fn check(shape: &[usize], k: usize) -> Result<(), DecompError> {
    if shape.len() != 3 {
        return Err(DiffError::InvalidShape {
            context: "decompose expects (B, L, D)",
            shape: shape.to_vec(),
        }
        .into());
    }
    if k % 2 == 0 {
        return Err(DecompError::EvenKernel(k));
    }
    if k > shape[1] {
        return Err(DecompError::KernelTooLong { kernel: k, len: shape[1] });
    }
    Ok(())
}

/// Splits `x (B, L, D)` along time into trend and seasonal parts.
pub fn decompose(x: &Tensor, k: usize) -> Result<DecompOutput, DecompError> {
    check(x.shape(), k)?;
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let half = (k / 2) as isize;
    let xd = x.data();
    let mut trend = vec![0.0; xd.len()];
    for bi in 0..b {
        for t in 0..l {
            for j in -half..=half {
                let src = (t as isize + j).clamp(0, l as isize - 1) as usize;
                for c in 0..d {
                    trend[(bi * l + t) * d + c] += xd[(bi * l + src) * d + c];
                }
            }
        }
    }
    trend.iter_mut().for_each(|v| *v /= k as f64);
    let seasonal = xd.iter().zip(&trend).map(|(a, m)| a - m).collect();
    Ok(DecompOutput {
        trend: Tensor::new(x.shape().to_vec(), trend)?,
        seasonal: Tensor::new(x.shape().to_vec(), seasonal)?,
    })
}

/// Differentiable form; returns `(trend, seasonal)`.
pub fn decompose_var(g: &mut Graph, x: Var, k: usize) -> Result<(Var, Var), DecompError> {
    check(g.shape(x), k)?;
    let d = g.shape(x)[2];
    let w = g.constant(Tensor::full(&[d, k], 1.0 / k as f64));
    let trend = g.depthwise_conv1d(x, w, 1)?;
    let seasonal = g.sub(x, trend)?;
    Ok((trend, seasonal))
}

/// Frequency response of the length-`k` moving average,
/// `(1/k) e^{-iw(k-1)/2} sin(kw/2) / sin(w/2)`, with gain 1 at `w = 0`.
pub fn ma_frequency_response(k: usize, omega: f64) -> Complex64 {
    let kf = k as f64;
    let half = (omega / 2.0).sin();
    let ratio = if half.abs() < 1e-300 { kf } else { (kf * omega / 2.0).sin() / half };
    Complex64::from_polar(1.0, -omega * (kf - 1.0) / 2.0) * (ratio / kf)
}
