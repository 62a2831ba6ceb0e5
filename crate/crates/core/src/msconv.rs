//! Multi-scale depthwise-separable dilated convolutions mixed by
//! per-sequence softmax weights.
//!
//! With the weights frozen, the depthwise stage is a convex combination of
//! convolutions, hence itself a single convolution whose kernel is
//! [`combined_kernel_oracle`].

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::params::{glorot, uniform, Bound, Linear, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MsConvError {
    #[error("no convolution branch fits a sequence of length {0}")]
    NoBranches(usize),
    #[error("mixing weights: expected {expected}, got {got}")]
    Weights { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub kernel: usize,
    pub dilation: usize,
    pub depthwise: ParamId,
    pub pointwise: ParamId,
}

impl Branch {
    /// Number of input samples one output depends on.
    pub fn span(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }
}

#[derive(Clone, Debug)]
pub struct MultiScaleConv {
    /// Sorted by (kernel, dilation); summation follows this order.
    pub branches: Vec<Branch>,
    pub query: Linear,
    pub d: usize,
}

impl MultiScaleConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        kernels: &[usize],
        dilations: &[usize],
    ) -> Self {
        let mut pairs: Vec<(usize, usize)> = kernels
            .iter()
            .flat_map(|&k| dilations.iter().map(move |&dl| (k, dl)))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        let branches: Vec<Branch> = pairs
            .into_iter()
            .map(|(k, dl)| Branch {
                kernel: k,
                dilation: dl,
                depthwise: store.add(
                    format!("{name}.k{k}d{dl}.depthwise"),
                    uniform(rng, &[d, k], 1.0 / (k as f64).sqrt()),
                ),
                pointwise: store.add(format!("{name}.k{k}d{dl}.pointwise"), glorot(rng, &[d, d], d, d)),
            })
            .collect();
        let nb = branches.len();
        Self {
            query: Linear::new(store, &format!("{name}.query"), rng, d, nb, true),
            branches,
            d,
        }
    }

    /// Indices of branches whose span fits within twice the sequence length.
    pub fn active_branches(&self, len: usize) -> Vec<usize> {
        (0..self.branches.len()).filter(|&i| self.branches[i].span() <= 2 * len).collect()
    }

    fn branch_out(&self, g: &mut Graph, p: &Bound, h: Var, i: usize, pointwise: bool) -> Result<Var, DiffError> {
        let b = &self.branches[i];
        let u = g.depthwise_conv1d(h, p.var(b.depthwise), b.dilation)?;
        if pointwise {
            g.matmul(u, p.var(b.pointwise))
        } else {
            Ok(u)
        }
    }

    /// Mixing weights `(B, n_active)` from the time-averaged input.
    pub fn weights(&self, g: &mut Graph, p: &Bound, h: Var, active: &[usize]) -> Result<Var, DiffError> {
        let pooled = g.mean_axis(h, 1)?;
        let scores = self.query.forward(g, p, pooled)?;
        let scores = if active.len() == self.branches.len() {
            scores
        } else {
            let cols: Vec<Var> = active.iter().map(|&i| g.slice(scores, 1, i, 1)).collect::<Result<_, _>>()?;
            g.concat(&cols, 1)?
        };
        Ok(g.softmax(scores))
    }

    /// `Σ α_b U_b(h)` with `α` from [`Self::weights`].
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, MsConvError> {
        let len = g.shape(h)[1];
        let active = self.active_branches(len);
        if active.is_empty() {
            return Err(MsConvError::NoBranches(len));
        }
        let alpha = self.weights(g, p, h, &active)?;
        let outs: Vec<Var> = active
            .iter()
            .map(|&i| self.branch_out(g, p, h, i, true))
            .collect::<Result<_, _>>()?;
        Ok(mix(g, &outs, alpha)?)
    }

    /// Mixture with fixed weights shared by every sequence (one per active
    /// branch); `pointwise = false` gives the depthwise-only rig.
    pub fn forward_frozen(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        alpha: &[f64],
        pointwise: bool,
    ) -> Result<Var, MsConvError> {
        let (b, len) = (g.shape(h)[0], g.shape(h)[1]);
        let active = self.active_branches(len);
        if active.is_empty() {
            return Err(MsConvError::NoBranches(len));
        }
        if alpha.len() != active.len() {
            return Err(MsConvError::Weights {
                expected: active.len(),
                got: alpha.len(),
            });
        }
        let a = g.constant(Tensor::from_fn(&[b, alpha.len()], |i| alpha[i % alpha.len()]));
        let outs: Vec<Var> = active
            .iter()
            .map(|&i| self.branch_out(g, p, h, i, pointwise))
            .collect::<Result<_, _>>()?;
        Ok(mix(g, &outs, a)?)
    }
}

/// `Σ_b α[:, b] outs[b]` for outputs `(B, L, d)` and weights `(B, nb)`.
fn mix(g: &mut Graph, outs: &[Var], alpha: Var) -> Result<Var, DiffError> {
    let s = g.shape(outs[0]).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let flat: Vec<Var> = outs
        .iter()
        .map(|&o| g.reshape(o, &[b, 1, l * d]))
        .collect::<Result<_, _>>()?;
    let stacked = g.concat(&flat, 1)?;
    let a = g.reshape(alpha, &[b, 1, outs.len()])?;
    let y = g.bmm(a, stacked)?;
    g.reshape(y, &[b, l, d])
}

/// A single-channel kernel expanded to unit dilation: `taps[j]` weights the
/// sample at offset `min_offset + j` from the output position.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedKernel {
    pub taps: Vec<f64>,
    pub min_offset: isize,
}

impl ExpandedKernel {
    /// Same-length convolution with edge replication.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let l = x.len() as isize;
        (0..l)
            .map(|t| {
                self.taps
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * x[(t + self.min_offset + j as isize).clamp(0, l - 1) as usize])
                    .sum()
            })
            .collect()
    }
}

/// `Σ α_b kernel_b` after expanding each dilated kernel onto a common,
/// center-aligned unit-dilation support.
pub fn combined_kernel_oracle(branches: &[(Vec<f64>, usize)], alphas: &[f64]) -> ExpandedKernel {
    assert_eq!(branches.len(), alphas.len(), "one weight per branch");
    let offsets = |k: usize, dl: usize| {
        let left = ((k - 1) * dl / 2) as isize;
        (0..k).map(move |j| (j * dl) as isize - left)
    };
    let lo = branches.iter().flat_map(|(w, dl)| offsets(w.len(), *dl)).min().unwrap_or(0);
    let hi = branches.iter().flat_map(|(w, dl)| offsets(w.len(), *dl)).max().unwrap_or(0);
    let mut taps = vec![0.0; (hi - lo + 1) as usize];
    for ((w, dl), a) in branches.iter().zip(alphas) {
        for (o, wj) in offsets(w.len(), *dl).zip(w) {
            taps[(o - lo) as usize] += a * wj;
        }
    }
    ExpandedKernel { taps, min_offset: lo }
}
