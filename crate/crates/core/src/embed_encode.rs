//! Token embedding, sinusoidal positions, pre-norm Transformer encoder
//! layers and the residual bidirectional LSTM block.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Tensor, Var};
use crate::params::{glorot, Bound, LayerNorm, Linear, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("head count {heads} does not divide model width {d_model}")]
    Heads { heads: usize, d_model: usize },
    #[error("bidirectional LSTM needs an even width, got {0}")]
    OddWidth(usize),
    #[error("non-finite activation in encoder layer {layer}")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Token convolution kernel width.
pub const TOKEN_KERNEL: usize = 3;

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    Tensor::from_fn(&[len, d_model], |idx| {
        let (pos, j) = (idx / d_model, idx % d_model);
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Adds a `(L, d)` table to every batch element of `x (B, L, d)`.
pub fn add_per_position(g: &mut Graph, x: Var, table: Var) -> Result<Var, DiffError> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let t = g.reshape(table, &[s[1] * s[2]])?;
    let y = g.add_row(flat, t)?;
    g.reshape(y, &s)
}

#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub kernel: ParamId,
    pub d_model: usize,
}

impl TokenEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d_in: usize, d_model: usize) -> Self {
        let fan_in = d_in * TOKEN_KERNEL;
        let kernel = store.add(
            format!("{name}.kernel"),
            glorot(rng, &[d_model, d_in, TOKEN_KERNEL], fan_in, d_model),
        );
        Self { kernel, d_model }
    }

    /// `conv(x) + PE`, length preserving.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, EncodeError> {
        self.forward_with(g, p, x, true)
    }

    pub fn forward_with(&self, g: &mut Graph, p: &Bound, x: Var, positions: bool) -> Result<Var, EncodeError> {
        let h = g.conv1d(x, p.var(self.kernel), 1)?;
        if !positions {
            return Ok(h);
        }
        let pe = g.constant(positional_encoding(g.shape(x)[1], self.d_model));
        Ok(add_per_position(g, h, pe)?)
    }
}

/// Multi-head self-attention without masking; returns output and weights
/// `(B, heads, L, L)`.
pub fn self_attention(
    g: &mut Graph,
    x: Var,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Var), DiffError> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let split = |g: &mut Graph, w: Var| -> Result<Var, DiffError> {
        let y = g.matmul(x, w)?;
        let y = g.reshape(y, &[b, l, heads, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let qh = split(g, q)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;
    let kt = g.transpose(kh)?;
    let scores = g.bmm(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores);
    let mixed = g.bmm(attn, vh)?;
    let merged = g.permute(mixed, &[0, 2, 1, 3])?;
    Ok((g.reshape(merged, &[b, l, d])?, attn))
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self, EncodeError> {
        if heads == 0 || d % heads != 0 {
            return Err(EncodeError::Heads { heads, d_model: d });
        }
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            wq: store.add(format!("{name}.wq"), glorot(rng, &[d, d], d, d)),
            wk: store.add(format!("{name}.wk"), glorot(rng, &[d, d], d, d)),
            wv: store.add(format!("{name}.wv"), glorot(rng, &[d, d], d, d)),
            wo: Linear::new(store, &format!("{name}.wo"), rng, d, d, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), rng, d, ffn, true),
            ff2: Linear::new(store, &format!("{name}.ff2"), rng, ffn, d, true),
            heads,
        })
    }

    /// `h + Attn(LN(h))`, then `+ FFN(LN(.))`; also returns attention weights.
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<(Var, Var), DiffError> {
        let n1 = self.ln1.forward(g, p, h)?;
        let (a, attn) = self_attention(g, n1, p.var(self.wq), p.var(self.wk), p.var(self.wv), self.heads)?;
        let a = self.wo.forward(g, p, a)?;
        let h1 = g.add(h, a)?;
        let n2 = self.ln2.forward(g, p, h1)?;
        let f = self.ff1.forward(g, p, n2)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, p, f)?;
        Ok((g.add(h1, f)?, attn))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rng: &mut ChaCha8Rng,
        d: usize,
        heads: usize,
        layers: usize,
        ffn: usize,
    ) -> Result<Self, EncodeError> {
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), rng, d, heads, ffn))
            .collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut h: Var) -> Result<Var, EncodeError> {
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?.0;
            if !g.value(h).is_finite() {
                return Err(EncodeError::NonFinite { layer: i });
            }
        }
        Ok(h)
    }
}

/// One LSTM direction: input map, recurrent map, bias; gate order i, f, g, o.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> Self {
        Self {
            wx: store.add(format!("{name}.wx"), glorot(rng, &[d, 4 * hidden], d, 4 * hidden)),
            wh: store.add(format!("{name}.wh"), glorot(rng, &[hidden, 4 * hidden], hidden, 4 * hidden)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden])),
            hidden,
        }
    }

    /// Hidden states `(B, L, hidden)` in original time order.
    pub fn run(&self, g: &mut Graph, p: &Bound, x: Var, reverse: bool) -> Result<Var, DiffError> {
        let s = g.shape(x).to_vec();
        let (b, l) = (s[0], s[1]);
        let h = self.hidden;
        let xw = g.matmul(x, p.var(self.wx))?;
        let xw = g.add_row(xw, p.var(self.b))?;
        let mut hs: Vec<Var> = Vec::with_capacity(l);
        let mut hprev = g.constant(Tensor::zeros(&[b, h]));
        let mut cprev = g.constant(Tensor::zeros(&[b, h]));
        let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in order {
            let xt = g.slice(xw, 1, t, 1)?;
            let xt = g.reshape(xt, &[b, 4 * h])?;
            let hw = g.matmul(hprev, p.var(self.wh))?;
            let gates = g.add(xt, hw)?;
            let hc = g.lstm_cell(gates, cprev)?;
            hprev = g.slice(hc, 1, 0, h)?;
            cprev = g.slice(hc, 1, h, h)?;
            hs.push(g.reshape(hprev, &[b, 1, h])?);
        }
        if reverse {
            hs.reverse();
        }
        g.concat(&hs, 1)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward_dir: LstmDirection,
    pub backward_dir: LstmDirection,
    pub proj: Linear,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, d: usize) -> Result<Self, EncodeError> {
        if d % 2 != 0 {
            return Err(EncodeError::OddWidth(d));
        }
        Ok(Self {
            forward_dir: LstmDirection::new(store, &format!("{name}.fwd"), rng, d, d / 2),
            backward_dir: LstmDirection::new(store, &format!("{name}.bwd"), rng, d, d / 2),
            proj: Linear::new(store, &format!("{name}.proj"), rng, d, d, true),
        })
    }

    /// Forward and backward hidden streams, before projection.
    pub fn streams(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var), DiffError> {
        Ok((self.forward_dir.run(g, p, x, false)?, self.backward_dir.run(g, p, x, true)?))
    }

    /// `x + W [h_fwd | h_bwd] + b`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, EncodeError> {
        let d = g.shape(x)[2];
        if d % 2 != 0 {
            return Err(EncodeError::OddWidth(d));
        }
        let (f, b) = self.streams(g, p, x)?;
        let both = g.concat(&[f, b], 2)?;
        let y = self.proj.forward(g, p, both)?;
        Ok(g.add(x, y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradient_check_many;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_input(seed: u64, shape: &[usize], range: f64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-range..range))
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.get(&[0, 0]), 0.0);
        assert_eq!(pe.get(&[0, 1]), 1.0);
        assert_eq!(pe.get(&[0, 2]), 0.0);
        assert_eq!(pe.get(&[0, 3]), 1.0);
        let want = [1f64.sin(), 1f64.cos(), (1.0 / 100.0f64).sin(), (1.0 / 100.0f64).cos()];
        for (j, w) in want.iter().enumerate() {
            assert!((pe.get(&[1, j]) - w).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_embeds_to_positions() {
        let mut store = ParamStore::new();
        let emb = TokenEmbedding::new(&mut store, "emb", &mut rng(0), 3, 8);
        for l in [1usize, 7, 30, 100] {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let x = g.constant(Tensor::zeros(&[2, l, 3]));
            let y = emb.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(y), &[2, l, 8]);
            let pe = positional_encoding(l, 8);
            for bi in 0..2 {
                for i in 0..l * 8 {
                    assert_eq!(g.value(y).data()[bi * l * 8 + i], pe.data()[i]);
                }
            }
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 5, 2]));
        assert!(emb.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "enc", &mut rng(1), 8, 2, 16).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(rand_input(2, &[3, 6, 8], 2.0));
        let (_, attn) = layer.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(attn), &[3, 2, 6, 6]);
        for row in g.value(attn).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&a| a >= 0.0));
        }
        assert!(matches!(
            EncoderLayer::new(&mut ParamStore::new(), "e", &mut rng(1), 8, 3, 16),
            Err(EncodeError::Heads { .. })
        ));
    }

    #[test]
    fn single_position_is_value_path_plus_ffn() {
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "enc", &mut rng(3), 4, 2, 8).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(rand_input(4, &[2, 1, 4], 1.0));
        let (y, attn) = layer.forward(&mut g, &p, x).unwrap();
        assert!(g.value(attn).data().iter().all(|&a| (a - 1.0).abs() < 1e-15));
        // explicit: h1 = h + LN(h) Wv Wo + bo, out = h1 + FFN(LN(h1))
        let n1 = layer.ln1.forward(&mut g, &p, x).unwrap();
        let v = g.matmul(n1, p.var(layer.wv)).unwrap();
        let o = layer.wo.forward(&mut g, &p, v).unwrap();
        let h1 = g.add(x, o).unwrap();
        let n2 = layer.ln2.forward(&mut g, &p, h1).unwrap();
        let f = layer.ff1.forward(&mut g, &p, n2).unwrap();
        let f = g.gelu(f);
        let f = layer.ff2.forward(&mut g, &p, f).unwrap();
        let want = g.add(h1, f).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(want)) < 1e-14);
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &mut rng(5), 8, 4, 2, 16).unwrap();
        let x = rand_input(6, &[1, 7, 8], 2.0);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let xp = Tensor::from_fn(&[1, 7, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let v = g.constant(t);
            let y = enc.forward(&mut g, &p, v).unwrap();
            g.value(y).clone()
        };
        let (y, yp) = (run(x), run(xp));
        for t in 0..7 {
            for j in 0..8 {
                assert!((yp.get(&[0, t, j]) - y.get(&[0, perm[t], j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_finite_on_bounded_inputs() {
        let mut store = ParamStore::new();
        let emb = TokenEmbedding::new(&mut store, "emb", &mut rng(7), 3, 16);
        let enc = Encoder::new(&mut store, "enc", &mut rng(8), 16, 4, 2, 64).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(rand_input(9, &[4, 30, 3], 10.0));
        let h = emb.forward(&mut g, &p, x).unwrap();
        let y = enc.forward(&mut g, &p, h).unwrap();
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn zero_bilstm_is_identity() {
        let mut store = ParamStore::new();
        let bl = BiLstm::new(&mut store, "bl", &mut rng(0), 6).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xt = rand_input(1, &[2, 5, 6], 1.0);
        let x = g.constant(xt.clone());
        let y = bl.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), &xt);
        assert!(matches!(
            BiLstm::new(&mut ParamStore::new(), "b", &mut rng(0), 5),
            Err(EncodeError::OddWidth(5))
        ));
    }

    #[test]
    fn reversal_swaps_streams() {
        let mut store = ParamStore::new();
        let bl = BiLstm::new(&mut store, "bl", &mut rng(2), 4).unwrap();
        // same block with the two directions' parameters exchanged
        let swapped = BiLstm {
            forward_dir: bl.backward_dir.clone(),
            backward_dir: bl.forward_dir.clone(),
            proj: bl.proj.clone(),
        };
        let x = rand_input(3, &[2, 6, 4], 1.0);
        let rev = Tensor::from_fn(&[2, 6, 4], |i| {
            let (b, t, c) = (i / 24, (i / 4) % 6, i % 4);
            x.get(&[b, 5 - t, c])
        });
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let rv = g.constant(rev);
        let (f, b) = bl.streams(&mut g, &p, xv).unwrap();
        let (fr, br) = swapped.streams(&mut g, &p, rv).unwrap();
        for bi in 0..2 {
            for t in 0..6 {
                for j in 0..2 {
                    let a = g.value(fr).get(&[bi, t, j]);
                    assert!((a - g.value(b).get(&[bi, 5 - t, j])).abs() < 1e-14);
                    let c = g.value(br).get(&[bi, t, j]);
                    assert!((c - g.value(f).get(&[bi, 5 - t, j])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn bilstm_gradient_check() {
        let mut store = ParamStore::new();
        let bl = BiLstm::new(&mut store, "bl", &mut rng(4), 4).unwrap();
        let mut inputs = vec![rand_input(5, &[2, 5, 4], 1.0)];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let w = rand_input(6, &[2, 5, 4], 1.0);
        let r = gradient_check_many(
            |g, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = bl.forward(g, &p, v[0]).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
                let wv = g.constant(w.clone());
                let m = g.mul(y, wv)?;
                Ok(g.sum(m))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
