//! Selective state-space block with a diagonal, strictly stable state matrix.
//!
//! Per step: `Δ_t = softplus(w_Δ·x_t + b_Δ)`, zero-order-hold discretization
//! `A_d = exp(AΔ_t)`, `B_d = (A_d - 1)/A · B`, state `h_t = A_d h_{t-1} + B_d W_v x_t`,
//! gated readout `z_t = s_t ⊙ C h_t + (1 - s_t) ⊙ z_{t-1}` with
//! `s_t = σ(W_s x_t + b_s)`, and output `z_t + D ⊙ x_t`.
//! `A = -softplus(Â)` keeps every eigenvalue negative, so `A_d ∈ (0, 1)`.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{softplus, DiffError, Graph, Tensor, Var};
use crate::params::{glorot, Bound, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("state eigenvalue {index} is {value}, must be negative")]
    UnstableEigenvalue { index: usize, value: f64 },
    #[error("discretization step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Margin used by [`stability_penalty`].
pub const STABILITY_MARGIN: f64 = 1e-3;

/// Zero-order-hold discretization of a diagonal system:
/// `A_d[i] = exp(A[i] Δ)`, `B_d[i, :] = (A_d[i] - 1) / A[i] · B[i, :]`.
pub fn discretize(a: &[f64], b: &Tensor, delta: f64) -> Result<(Vec<f64>, Tensor), SsmError> {
    if !(delta > 0.0) {
        return Err(SsmError::NonPositiveStep(delta));
    }
    if let Some((index, &value)) = a.iter().enumerate().find(|(_, &v)| !(v < 0.0)) {
        return Err(SsmError::UnstableEigenvalue { index, value });
    }
    let n = a.len();
    assert_eq!(b.shape()[0], n, "B must have one row per state");
    let d = b.numel() / n;
    let ad: Vec<f64> = a.iter().map(|&ai| (ai * delta).exp()).collect();
    // expm1 keeps (exp(AΔ) - 1)/A accurate as Δ -> 0
    let scale: Vec<f64> = a.iter().map(|&ai| (ai * delta).exp_m1() / ai).collect();
    let bd = Tensor::from_fn(b.shape(), |i| scale[i / d] * b.data()[i]);
    Ok((ad, bd))
}

/// `h_t = a_t ⊙ h_{t-1} + u_t` over `(L, n)` row-major buffers, `h_{-1} = 0`.
pub fn scan_sequential(a: &[f64], u: &[f64], n: usize) -> Vec<f64> {
    let mut h = vec![0.0; u.len()];
    for t in 0..u.len() / n {
        for i in 0..n {
            let prev = if t == 0 { 0.0 } else { h[(t - 1) * n + i] };
            h[t * n + i] = a[t * n + i] * prev + u[t * n + i];
        }
    }
    h
}

/// Same recurrence computed block-wise with the associative combine
/// `(a1, u1) ∘ (a2, u2) = (a1 a2, a2 u1 + u2)`: each block is scanned from a
/// zero state, then the carried-in state is propagated through the block's
/// cumulative decay.
pub fn scan_blocked(a: &[f64], u: &[f64], n: usize, block: usize) -> Vec<f64> {
    let len = u.len() / n;
    let block = block.max(1);
    let mut h = vec![0.0; u.len()];
    let mut decay = vec![0.0; u.len()];
    // local pass, independent per block
    for start in (0..len).step_by(block) {
        for t in start..(start + block).min(len) {
            for i in 0..n {
                let k = t * n + i;
                if t == start {
                    h[k] = u[k];
                    decay[k] = a[k];
                } else {
                    h[k] = a[k] * h[k - n] + u[k];
                    decay[k] = a[k] * decay[k - n];
                }
            }
        }
    }
    // carry pass over block boundaries
    for start in (block..len).step_by(block) {
        let carry: Vec<f64> = h[(start - 1) * n..start * n].to_vec();
        for t in start..(start + block).min(len) {
            for i in 0..n {
                let k = t * n + i;
                h[k] += decay[k] * carry[i];
            }
        }
    }
    h
}

/// `Σ relu(A_i + margin)²`; zero whenever every `A_i ≤ -margin`.
pub fn stability_penalty(a: &[f64]) -> f64 {
    a.iter().map(|&v| (v + STABILITY_MARGIN).max(0.0).powi(2)).sum()
}

/// Initial discretization step.
const INIT_STEP: f64 = 0.1;

fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub a_hat: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d_skip: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_v: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
    pub d: usize,
    pub n: usize,
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize, n: usize) -> Self {
        // |A| = 1..N with a small initial step keeps every mode's DC gain 1/|A| <= 1
        let a_hat = Tensor::from_fn(&[n], |i| inv_softplus((i + 1) as f64));
        Self {
            a_hat: store.add(format!("{name}.a_hat"), a_hat),
            b: store.add(format!("{name}.b"), glorot(rng, &[n, d], d, n)),
            c: store.add(format!("{name}.c"), glorot(rng, &[d, n], n, d)),
            d_skip: store.add(format!("{name}.d_skip"), Tensor::zeros(&[d])),
            w_delta: store.add(format!("{name}.w_delta"), glorot(rng, &[d, 1], d, 1)),
            b_delta: store.add(format!("{name}.b_delta"), Tensor::scalar(inv_softplus(INIT_STEP))),
            w_v: store.add(format!("{name}.w_v"), glorot(rng, &[d, d], d, d)),
            w_s: store.add(format!("{name}.w_s"), glorot(rng, &[d, d], d, d)),
            b_s: store.add(format!("{name}.b_s"), Tensor::zeros(&[d])),
            d,
            n,
        }
    }

    /// Effective diagonal `A = -softplus(Â)` from the current parameters.
    pub fn eigenvalues(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.a_hat).data().iter().map(|&v| -softplus(v)).collect()
    }

    /// `A` as a graph variable of shape `(1, N)`.
    pub fn a_var(&self, g: &mut Graph, p: &Bound) -> Result<Var, DiffError> {
        let sp = g.softplus(p.var(self.a_hat));
        let a = g.neg(sp);
        g.reshape(a, &[1, self.n])
    }

    /// Block output `z_t + D ⊙ x_t` for `x (B, L, d)`; the caller adds the residual.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, SsmError> {
        Ok(self.forward_states(g, p, x)?.0)
    }

    /// Output plus the state trajectory `h (B, L, N)`.
    pub fn forward_states(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var), SsmError> {
        let pre = g.matmul(x, p.var(self.w_delta))?;
        let pre = g.add_row(pre, p.var(self.b_delta))?;
        let delta = g.softplus(pre);
        let a = self.a_var(g, p)?;
        let da = g.matmul(delta, a)?;
        let ad = g.exp(da);
        let a_row = g.reshape(a, &[self.n])?;
        let inv_a = g.recip(a_row);
        let am1 = g.add_scalar(ad, -1.0);
        let zoh = g.mul_row(am1, inv_a)?;
        let v = g.matmul(x, p.var(self.w_v))?;
        let bt = g.transpose(p.var(self.b))?;
        let bv = g.matmul(v, bt)?;
        let u = g.mul(zoh, bv)?;
        let h = g.scan(ad, u)?;
        check_finite(g.value(h))?;
        let ct = g.transpose(p.var(self.c))?;
        let ch = g.matmul(h, ct)?;
        let s = g.matmul(x, p.var(self.w_s))?;
        let s = g.add_row(s, p.var(self.b_s))?;
        let s = g.sigmoid(s);
        let keep = g.one_minus(s);
        let write = g.mul(s, ch)?;
        let z = g.scan(keep, write)?;
        check_finite(g.value(z))?;
        let skip = g.mul_row(x, p.var(self.d_skip))?;
        Ok((g.add(z, skip)?, h))
    }

    /// Penalty on the effective eigenvalues, differentiable in `Â`.
    pub fn stability_penalty_var(&self, g: &mut Graph, p: &Bound) -> Result<Var, DiffError> {
        let a = self.a_var(g, p)?;
        let shifted = g.add_scalar(a, STABILITY_MARGIN);
        let r = g.relu(shifted);
        let sq = g.square(r);
        Ok(g.sum(sq))
    }
}

fn check_finite(t: &Tensor) -> Result<(), SsmError> {
    let s = t.shape();
    let (l, n) = (s[1], s[2]);
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(SsmError::NonFinite { step: (i / n) % l }),
        None => Ok(()),
    }
}
