//! Cross-channel attention, the seasonal/trend gate, and the gated
//! multi-modal ensemble with its weight regularizer.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::params::{Bound, Linear, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("at least one branch is required")]
    NoBranches,
    #[error("weights at step {step} are off the simplex (sum {sum}, min {min})")]
    OffSimplex { step: usize, sum: f64, min: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Attention across channels from time-pooled summaries. One `C x C` matrix
/// per sequence is shared by every time step.
#[derive(Clone, Debug)]
pub struct CrossChannelAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub dk: usize,
}

impl CrossChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize, dk: usize) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), rng, d, dk, false),
            wk: Linear::new(store, &format!("{name}.wk"), rng, d, dk, false),
            wv: Linear::new(store, &format!("{name}.wv"), rng, d, d, false),
            dk,
        }
    }

    /// Attention matrix `(B, C, C)` for `h (B, T, C, d)`.
    pub fn attention(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, DiffError> {
        let pooled = g.mean_axis(h, 1)?;
        let q = self.wq.forward(g, p, pooled)?;
        let k = self.wk.forward(g, p, pooled)?;
        let kt = g.transpose(k)?;
        let s = g.bmm(q, kt)?;
        let s = g.scale(s, 1.0 / (self.dk as f64).sqrt());
        Ok(g.softmax(s))
    }

    /// `out[b,t,i] = sum_j alpha[b,i,j] (h[b,t,j] W_V)`; returns `(out, alpha)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<(Var, Var), DiffError> {
        let s = g.shape(h).to_vec();
        if s.len() != 4 {
            return Err(DiffError::InvalidShape {
                context: "cross-channel attention expects (B, T, C, d)",
                shape: s,
            });
        }
        let (b, t, c, d) = (s[0], s[1], s[2], s[3]);
        let alpha = self.attention(g, p, h)?;
        let v = self.wv.forward(g, p, h)?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        let v = g.reshape(v, &[b, c, t * d])?;
        let mixed = g.bmm(alpha, v)?;
        let mixed = g.reshape(mixed, &[b, c, t, d])?;
        Ok((g.permute(mixed, &[0, 2, 1, 3])?, alpha))
    }
}

/// Scalar sigmoid gate per sequence: `w s + (1 - w) t`.
#[derive(Clone, Debug)]
pub struct ComponentGate {
    pub score: Linear,
}

impl ComponentGate {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            score: Linear::new(store, &format!("{name}.score"), rng, 2 * d, 1, true),
        }
    }

    /// Gate values `(B, 1)` from the pooled, concatenated components.
    pub fn weight(&self, g: &mut Graph, p: &Bound, seasonal: Var, trend: Var) -> Result<Var, DiffError> {
        if g.shape(seasonal) != g.shape(trend) {
            return Err(DiffError::ShapeMismatch {
                op: "component fuse",
                lhs: g.shape(seasonal).to_vec(),
                rhs: g.shape(trend).to_vec(),
            });
        }
        let ps = g.mean_axis(seasonal, 1)?;
        let pt = g.mean_axis(trend, 1)?;
        let both = g.concat(&[ps, pt], 1)?;
        let s = self.score.forward(g, p, both)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, seasonal: Var, trend: Var) -> Result<Var, DiffError> {
        let w = self.weight(g, p, seasonal, trend)?;
        blend(g, seasonal, trend, w)
    }

    pub fn forward_frozen(&self, g: &mut Graph, seasonal: Var, trend: Var, w: f64) -> Result<Var, DiffError> {
        let b = g.shape(seasonal)[0];
        let wv = g.constant(Tensor::full(&[b], w));
        blend(g, seasonal, trend, wv)
    }
}

fn blend(g: &mut Graph, seasonal: Var, trend: Var, w: Var) -> Result<Var, DiffError> {
    let diff = g.sub(seasonal, trend)?;
    let scaled = g.scale_batch(diff, w)?;
    g.add(trend, scaled)
}

/// Softmax gates over modality predictions from a context vector
/// `c = MLP(concat_m features_m)` at each horizon step.
#[derive(Clone, Debug)]
pub struct EnsembleGate {
    pub context: Linear,
    pub gates: Linear,
    pub branches: usize,
}

impl EnsembleGate {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize, branches: usize, hidden: usize) -> Self {
        Self {
            context: Linear::new(store, &format!("{name}.context"), rng, branches * d, hidden, true),
            gates: Linear::new(store, &format!("{name}.gates"), rng, hidden, branches, true),
            branches,
        }
    }

    /// Weights `(B, H, M)` from per-branch features, each `(B, H, d)`.
    pub fn weights(&self, g: &mut Graph, p: &Bound, features: &[Var]) -> Result<Var, FusionError> {
        if features.is_empty() {
            return Err(FusionError::NoBranches);
        }
        let cat = g.concat(features, 2)?;
        let c = self.context.forward(g, p, cat)?;
        let c = g.gelu(c);
        let s = self.gates.forward(g, p, c)?;
        Ok(g.softmax(s))
    }
}

/// `sum_m w[..., m] y_m` for predictions `y_m (B, H)` and weights `(B, H, M)`.
pub fn ensemble_combine(g: &mut Graph, preds: &[Var], w: Var) -> Result<Var, FusionError> {
    let stacked = stack_last(g, preds)?;
    let prod = g.mul(stacked, w)?;
    Ok(g.sum_axis(prod, 2)?)
}

/// Standard deviation of the weighted Gaussian mixture:
/// `sqrt(sum_m w_m (s_m^2 + (mu_m - mu)^2))`.
pub fn mixture_std(g: &mut Graph, means: &[Var], stds: &[Var], w: Var, mean: Var) -> Result<Var, FusionError> {
    let mut terms = Vec::with_capacity(means.len());
    for (&m, &s) in means.iter().zip(stds) {
        let dev = g.sub(m, mean)?;
        let dev2 = g.square(dev);
        let var = g.square(s);
        terms.push(g.add(var, dev2)?);
    }
    let total = ensemble_combine(g, &terms, w)?;
    Ok(g.sqrt(total))
}

fn stack_last(g: &mut Graph, xs: &[Var]) -> Result<Var, FusionError> {
    if xs.is_empty() {
        return Err(FusionError::NoBranches);
    }
    let mut cols = Vec::with_capacity(xs.len());
    for &x in xs {
        let mut s = g.shape(x).to_vec();
        s.push(1);
        cols.push(g.reshape(x, &s)?);
    }
    let axis = g.shape(cols[0]).len() - 1;
    Ok(g.concat(&cols, axis)?)
}

/// `lambda_ent sum_t sum_m w log w + lambda_tv sum_t |w_t - w_{t-1}|^2`
/// for weights `(T, M)`. With `lambda_ent > 0` the first term rewards
/// entropy.
pub fn weight_regularizer(w: &Tensor, lambda_ent: f64, lambda_tv: f64) -> Result<f64, FusionError> {
    let m = *w.shape().last().ok_or(DiffError::InvalidShape {
        context: "weights need a branch axis",
        shape: vec![],
    })?;
    let rows: Vec<&[f64]> = w.data().chunks(m).collect();
    for (step, r) in rows.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        let min = r.iter().copied().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > 1e-9 || min < -1e-9 {
            return Err(FusionError::OffSimplex { step, sum, min });
        }
    }
    let neg_entropy: f64 = w.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let tv: f64 = rows
        .windows(2)
        .map(|p| p[0].iter().zip(p[1]).map(|(a, b)| (b - a).powi(2)).sum::<f64>())
        .sum();
    Ok(lambda_ent * neg_entropy + lambda_tv * tv)
}

/// Graph form for weights `(B, T, M)`, averaged over the batch. A `1e-12`
/// offset inside the log keeps saturated softmax outputs finite.
pub fn weight_regularizer_var(g: &mut Graph, w: Var, lambda_ent: f64, lambda_tv: f64) -> Result<Var, DiffError> {
    let s = g.shape(w).to_vec();
    let (b, t) = (s[0], s[1]);
    let lw = g.add_scalar(w, 1e-12);
    let lw = g.log(lw);
    let ent = g.mul(w, lw)?;
    let ent = g.sum(ent);
    let mut total = g.scale(ent, lambda_ent / b as f64);
    if t > 1 {
        let hi = g.slice(w, 1, 1, t - 1)?;
        let lo = g.slice(w, 1, 0, t - 1)?;
        let d = g.sub(hi, lo)?;
        let d = g.square(d);
        let tv = g.sum(d);
        let tv = g.scale(tv, lambda_tv / b as f64);
        total = g.add(total, tv)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradient_check_many;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn attend(store: &ParamStore, cca: &CrossChannelAttention, h: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let hv = g.constant(h.clone());
        let (o, a) = cca.forward(&mut g, &p, hv).unwrap();
        (g.value(o).clone(), g.value(a).clone())
    }

    #[test]
    fn single_channel_is_value_map() {
        let mut store = ParamStore::new();
        let cca = CrossChannelAttention::new(&mut store, "x", &mut rng(0), 3, 2);
        let h = rand_tensor(&mut rng(1), &[2, 5, 1, 3]);
        let (o, a) = attend(&store, &cca, &h);
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let wv = store.get(cca.wv.w);
        let want = Tensor::from_fn(&[2, 5, 1, 3], |i| {
            let (row, j) = (i / 3, i % 3);
            (0..3).map(|k| h.data()[row * 3 + k] * wv.get(&[k, j])).sum()
        });
        assert!(o.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn identical_channels_get_uniform_attention() {
        let mut store = ParamStore::new();
        let cca = CrossChannelAttention::new(&mut store, "x", &mut rng(2), 4, 3);
        let base = rand_tensor(&mut rng(3), &[1, 6, 1, 4]);
        let h = Tensor::from_fn(&[1, 6, 3, 4], |i| base.data()[(i / 12) * 4 + i % 4]);
        let (o, a) = attend(&store, &cca, &h);
        assert!(a.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        for t in 0..6 {
            for c in 1..3 {
                for j in 0..4 {
                    assert!((o.get(&[0, t, c, j]) - o.get(&[0, t, 0, j])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_channel_hand_computation() {
        let mut store = ParamStore::new();
        let cca = CrossChannelAttention::new(&mut store, "x", &mut rng(4), 1, 1);
        for id in [cca.wq.w, cca.wk.w, cca.wv.w] {
            *store.get_mut(id) = Tensor::full(&[1, 1], 1.0);
        }
        // pooled summaries 1 and 2 from series that vary over time
        let h = Tensor::new(vec![1, 2, 2, 1], vec![0.5, 3.0, 1.5, 1.0]).unwrap();
        let (o, a) = attend(&store, &cca, &h);
        let (p1, p2) = (1.0f64, 2.0f64);
        let row = |q: f64| {
            let (e1, e2) = ((q * p1).exp(), (q * p2).exp());
            [e1 / (e1 + e2), e2 / (e1 + e2)]
        };
        let (r1, r2) = (row(p1), row(p2));
        assert!((a.get(&[0, 0, 0]) - r1[0]).abs() < 1e-15 && (a.get(&[0, 1, 1]) - r2[1]).abs() < 1e-15);
        for t in 0..2 {
            let (v1, v2) = (h.get(&[0, t, 0, 0]), h.get(&[0, t, 1, 0]));
            assert!((o.get(&[0, t, 0, 0]) - (r1[0] * v1 + r1[1] * v2)).abs() < 1e-14);
            assert!((o.get(&[0, t, 1, 0]) - (r2[0] * v1 + r2[1] * v2)).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_shared_across_time() {
        let mut store = ParamStore::new();
        let cca = CrossChannelAttention::new(&mut store, "x", &mut rng(5), 4, 2);
        let h = rand_tensor(&mut rng(6), &[1, 7, 3, 4]);
        let (o, a) = attend(&store, &cca, &h);
        for row in a.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let wv = store.get(cca.wv.w);
        for t in [1usize, 5] {
            for i in 0..3 {
                for jd in 0..4 {
                    let want: f64 = (0..3)
                        .map(|j| a.get(&[0, i, j]) * (0..4).map(|k| h.get(&[0, t, j, k]) * wv.get(&[k, jd])).sum::<f64>())
                        .sum();
                    assert!((o.get(&[0, t, i, jd]) - want).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn channel_permutation_equivariance(seed in 0u64..1000, perm_idx in 0usize..6) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let mut store = ParamStore::new();
            let cca = CrossChannelAttention::new(&mut store, "x", &mut rng(seed), 3, 2);
            let h = rand_tensor(&mut rng(seed + 1), &[2, 4, 3, 3]);
            let ph = Tensor::from_fn(&[2, 4, 3, 3], |i| {
                let (bt, c, j) = (i / 9, (i / 3) % 3, i % 3);
                h.data()[bt * 9 + perm[c] * 3 + j]
            });
            let (o, _) = attend(&store, &cca, &h);
            let (po, _) = attend(&store, &cca, &ph);
            for i in 0..o.numel() {
                let (bt, c, j) = (i / 9, (i / 3) % 3, i % 3);
                prop_assert!((po.data()[i] - o.data()[bt * 9 + perm[c] * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn component_gate_examples() {
        let mut store = ParamStore::new();
        let gate = ComponentGate::new(&mut store, "g", &mut rng(7), 3);
        let mut r = rng(8);
        let s = rand_tensor(&mut r, &[2, 4, 3]);
        let t = rand_tensor(&mut r, &[2, 4, 3]);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let (sv, tv) = (g.constant(s.clone()), g.constant(t.clone()));
        let same = gate.forward(&mut g, &p, sv, sv).unwrap();
        assert!(g.value(same).max_abs_diff(&s) < 1e-15);
        let w = gate.weight(&mut g, &p, sv, tv).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let frozen = gate.forward_frozen(&mut g, sv, tv, 0.25).unwrap();
        let want = Tensor::from_fn(&[2, 4, 3], |i| 0.25 * s.data()[i] + 0.75 * t.data()[i]);
        assert!(g.value(frozen).max_abs_diff(&want) < 1e-12);
        let short = g.constant(Tensor::zeros(&[2, 3, 3]));
        assert!(gate.forward(&mut g, &p, sv, short).is_err());

        let bias = gate.score.b.unwrap();
        *store.get_mut(bias) = Tensor::full(&[1], 1e3);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let (sv, tv) = (g.constant(s.clone()), g.constant(t));
        let sat = gate.forward(&mut g, &p, sv, tv).unwrap();
        assert!(g.value(sat).max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn ensemble_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 1], 2.0));
        let b = g.constant(Tensor::full(&[1, 1], 6.0));
        let w = g.constant(Tensor::new(vec![1, 1, 2], vec![0.75, 0.25]).unwrap());
        let y = ensemble_combine(&mut g, &[a, b], w).unwrap();
        assert!((g.value(y).item() - 3.0).abs() < 1e-15);
        let w = g.constant(Tensor::new(vec![1, 1, 2], vec![0.1, 0.9]).unwrap());
        let y = ensemble_combine(&mut g, &[a, a], w).unwrap();
        assert!((g.value(y).item() - 2.0).abs() < 1e-15);
        assert_eq!(ensemble_combine(&mut g, &[], w), Err(FusionError::NoBranches));

        let mut store = ParamStore::new();
        let gate = EnsembleGate::new(&mut store, "e", &mut rng(9), 3, 1, 4);
        let p = store.bind_frozen(&mut g);
        let f = g.constant(rand_tensor(&mut rng(10), &[2, 3, 3]));
        let w = gate.weights(&mut g, &p, &[f]).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ensemble_stays_within_branch_range() {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        let gate = EnsembleGate::new(&mut store, "e", &mut r, 2, 3, 4);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let feats: Vec<Var> = (0..3).map(|_| g.constant(rand_tensor(&mut r, &[4, 5, 2]))).collect();
        let preds: Vec<Var> = (0..3).map(|_| g.constant(rand_tensor(&mut r, &[4, 5]))).collect();
        let w = gate.weights(&mut g, &p, &feats).unwrap();
        let y = ensemble_combine(&mut g, &preds, w).unwrap();
        for i in 0..20 {
            let vals: Vec<f64> = preds.iter().map(|&v| g.value(v).data()[i]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let yi = g.value(y).data()[i];
            assert!(yi >= lo - 1e-12 && yi <= hi + 1e-12);
        }
    }

    #[test]
    fn weight_regularizer_examples() {
        let alt = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((weight_regularizer(&alt, 0.0, 1.0).unwrap() - 4.0).abs() < 1e-15);
        let uniform = Tensor::full(&[4, 2], 0.5);
        let onehot = Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let u = weight_regularizer(&uniform, 1.0, 1.0).unwrap();
        let o = weight_regularizer(&onehot, 1.0, 1.0).unwrap();
        assert!((u + 4.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(o, 0.0);
        assert!(u < o);
        let mut r = rng(12);
        for _ in 0..50 {
            let a: f64 = r.gen_range(0.0..1.0);
            let w = Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { a } else { 1.0 - a });
            assert!(weight_regularizer(&w, 1.0, 1.0).unwrap() >= u - 1e-12);
        }
        let bad = Tensor::new(vec![1, 2], vec![0.6, 0.6]).unwrap();
        assert!(matches!(weight_regularizer(&bad, 1.0, 1.0), Err(FusionError::OffSimplex { step: 0, .. })));

        let mut g = Graph::new();
        let wv = g.constant(alt.clone().reshape(&[1, 3, 2]).unwrap());
        let v = weight_regularizer_var(&mut g, wv, 0.3, 1.0).unwrap();
        assert!((g.value(v).item() - weight_regularizer(&alt, 0.3, 1.0).unwrap()).abs() < 1e-9);
    }

    fn check_all(store: &ParamStore, x: Tensor, f: impl Fn(&mut Graph, &Bound, Var) -> Result<Var, DiffError>) {
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let rep = gradient_check_many(
            |g, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = f(g, &p, v[0])?;
                let w = g.constant(Tensor::from_fn(g.shape(y), |i| ((i * 37) % 11) as f64 / 5.0 - 1.0));
                let m = g.mul(y, w)?;
                Ok(g.sum(m))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn gradient_checks() {
        let mut r = rng(13);
        let mut store = ParamStore::new();
        let cca = CrossChannelAttention::new(&mut store, "x", &mut r, 3, 2);
        check_all(&store, rand_tensor(&mut r, &[2, 4, 3, 3]), |g, p, x| Ok(cca.forward(g, p, x)?.0));

        let mut store = ParamStore::new();
        let gate = ComponentGate::new(&mut store, "c", &mut r, 3);
        let trend = rand_tensor(&mut r, &[2, 4, 3]);
        check_all(&store, rand_tensor(&mut r, &[2, 4, 3]), |g, p, x| {
            let t = g.constant(trend.clone());
            gate.forward(g, p, x, t)
        });

        let mut store = ParamStore::new();
        let ens = EnsembleGate::new(&mut store, "e", &mut r, 3, 2, 4);
        let other = rand_tensor(&mut r, &[2, 2, 3]);
        let preds = rand_tensor(&mut r, &[2, 2]);
        check_all(&store, rand_tensor(&mut r, &[2, 2, 3]), |g, p, x| {
            let o = g.constant(other.clone());
            let w = ens.weights(g, p, &[x, o]).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            let y1 = g.sum_axis(x, 2)?;
            let y2 = g.constant(preds.clone());
            let y = ensemble_combine(g, &[y1, y2], w).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            let reg = weight_regularizer_var(g, w, 0.5, 0.7)?;
            let reg = g.reshape(reg, &[1, 1])?;
            let reg = g.concat(&[reg, reg], 1)?;
            let reg = g.concat(&[reg, reg], 0)?;
            g.add(y, reg)
        });
    }
}
