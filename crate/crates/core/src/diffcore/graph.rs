//! Arena-backed reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the arena index order is a
//! topological order and `backward` simply walks it in reverse, visiting
//! each node once. A graph is single-use: after `backward` the adjoints must
//! be cleared with [`Graph::reset_adjoints`] before another backward pass.

use rustfft::num_complex::Complex64;

use super::complex::plan;
use super::tensor::numel;
use super::{DiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Gelu,
    Relu,
    Square,
    Sqrt,
    Recip,
    Neg,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Recip => "recip",
            Unary::Neg => "neg",
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Softplus => softplus(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        Unary::Relu => x.max(0.0),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Recip => 1.0 / x,
        Unary::Neg => -x,
    }
}

/// d(output)/d(input) given input `x` and output `y`.
fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Softplus => sigmoid(x),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Gelu => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Recip => -y * y,
        Unary::Neg => -1.0,
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleBatch(Var, Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Conv1d { x: Var, w: Var, dilation: usize },
    DepthwiseConv1d { x: Var, w: Var, dilation: usize },
    LayerNorm { x: Var, eps: f64 },
    Scan { a: Var, u: Var },
    SpectralFilter { x: Var, mr: Var, mi: Var },
    LstmCell { gates: Var, c: Var },
    Huber { x: Var, delta: f64 },
    ComplexAbs { re: Var, im: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph holding values, adjoints and backward rules.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// out[m x n] += a[m x k] * b[k x n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(m, k, n, a, [k, 1], b, [n, 1], out);
}

// out[m x k] += g[m x n] * b[k x n]^T
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(m, n, k, g, [n, 1], b, [1, n], out);
}

// out[k x n] += a[m x k]^T * g[m x n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(k, m, n, a, [1, k], g, [n, 1], out);
}

// out[m x n] += a[m x k] * b[k x n] with explicit (row, col) strides for a and b.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(m: usize, k: usize, n: usize, a: &[f64], sa: [usize; 2], b: &[f64], sb: [usize; 2], out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n, "gemm operand too short");
    // SAFETY: the asserted lengths cover every index reachable through the
    // given strides, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa[0] as isize,
            sa[1] as isize,
            b.as_ptr(),
            sb[0] as isize,
            sb[1] as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn clamp_index(t: isize, len: usize) -> usize {
    t.clamp(0, len as isize - 1) as usize
}

/// Offset of tap `j` relative to the output position for an edge-padded
/// same-length convolution.
fn tap_offset(j: usize, k: usize, dilation: usize) -> isize {
    let left = ((k - 1) * dilation / 2) as isize;
    (j * dilation) as isize - left
}

fn check_span(op: &'static str, len: usize, k: usize, dilation: usize) -> Result<(), DiffError> {
    if dilation == 0 || (k - 1) * dilation > 2 * len {
        return Err(DiffError::InvalidArgument(format!(
            "{op}: kernel {k} with dilation {dilation} spans more than twice the input length {len}"
        )));
    }
    Ok(())
}

/// Real part of `ifft(mask * fft(lane))` for every (batch, channel) lane of a
/// (B, L, d) tensor; `conj_mask` applies the conjugated mask instead.
fn spectral_apply(x: &Tensor, mr: &[f64], mi: &[f64], conj_mask: bool) -> Vec<f64> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let fwd = plan(l, false);
    let inv = plan(l, true);
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); l];
    let sign = if conj_mask { -1.0 } else { 1.0 };
    for bi in 0..b {
        for c in 0..d {
            for t in 0..l {
                buf[t] = Complex64::new(xs[(bi * l + t) * d + c], 0.0);
            }
            fwd.process(&mut buf);
            for (k, z) in buf.iter_mut().enumerate() {
                *z *= Complex64::new(mr[k * d + c], sign * mi[k * d + c]);
            }
            inv.process(&mut buf);
            for t in 0..l {
                out[(bi * l + t) * d + c] = buf[t].re / l as f64;
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameter or data we want gradients for).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adjoint of `v` after `backward`; zeros if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, DiffError> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `1 - a`, a common gate complement.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("mul_scalar_var", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::MulScalarVar(a, s), rg))
    }

    fn row_check(&self, op: &'static str, a: Var, row: Var) -> Result<usize, DiffError> {
        let n = *self.shape(a).last().expect("rank >= 1");
        if self.value(row).numel() != n {
            return Err(mismatch(op, self.shape(a), self.shape(row)));
        }
        Ok(n)
    }

    /// Adds a vector along the last axis of `a` (bias addition).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let n = self.row_check("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies `a` by a vector along its last axis (per-feature gain).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let n = self.row_check("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x * r[i % n]).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    /// Scales each leading-axis slice `a[b, ...]` by `w[b]`.
    pub fn scale_batch(&mut self, a: Var, w: Var) -> Result<Var, DiffError> {
        let b = self.shape(a)[0];
        if self.value(w).numel() != b {
            return Err(mismatch("scale_batch", self.shape(a), self.shape(w)));
        }
        let inner = self.value(a).numel() / b;
        let wv = self.value(w).data().to_vec();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x * wv[i / inner]).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, w]);
        Ok(self.push(value, Op::ScaleBatch(a, w), rg))
    }

    /// `a (..., k) x b (k, n) -> (..., n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || *sa.last().expect("rank >= 1") != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().expect("rank >= 1") = n;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Batched matmul over identical leading axes: `(.., m, k) x (.., k, n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 3 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm_nn(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Bmm(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(a).permute(axes)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(DiffError::InvalidAxis {
                op: "transpose",
                axis: 1,
                shape: self.shape(a).to_vec(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = *va.shape().last().expect("rank >= 1");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let value = self.value(a).map(|x| unary_forward(kind, x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary(a, kind), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<(Vec<usize>, Vec<f64>), DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidAxis { op, axis, shape });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let src = &d[(o * len + t) * inner..(o * len + t + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).cloned().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok((out_shape, out))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let (shape, data) = self.reduce_axis(a, axis, "sum_axis")?;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SumAxis(a, axis), rg))
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let (shape, mut data) = self.reduce_axis(a, axis, "mean_axis")?;
        let len = self.shape(a)[axis] as f64;
        data.iter_mut().for_each(|v| *v /= len);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MeanAxis(a, axis), rg))
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidAxis { op: "slice", axis, shape });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(DiffError::InvalidArgument(format!(
                "slice: range {start}..{} out of bounds for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x: a, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = self.shape(*xs.first().ok_or_else(|| DiffError::InvalidArgument("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(DiffError::InvalidAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Same-length 1-D convolution over axis 1 of `x (B, L, Cin)` with kernel
    /// `w (Cout, Cin, k)`; borders are handled by edge replication.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var, DiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] {
            return Err(mismatch("conv1d", &sx, &sw));
        }
        let (b, l, cin) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        check_span("conv1d", l, k, dilation)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * l * cout];
        let mut window = vec![0.0; cin * k];
        for bi in 0..b {
            for t in 0..l {
                for j in 0..k {
                    let src = clamp_index(t as isize + tap_offset(j, k, dilation), l);
                    for c in 0..cin {
                        window[c * k + j] = xd[(bi * l + src) * cin + c];
                    }
                }
                let orow = &mut out[(bi * l + t) * cout..(bi * l + t + 1) * cout];
                for (o, ov) in orow.iter_mut().enumerate() {
                    *ov = wd[o * cin * k..(o + 1) * cin * k].iter().zip(&window).map(|(a, b)| a * b).sum();
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![b, l, cout], out)?, Op::Conv1d { x, w, dilation }, rg))
    }

    /// Per-channel same-length convolution: `x (B, L, C)`, `w (C, k)`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var, DiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] {
            return Err(mismatch("depthwise_conv1d", &sx, &sw));
        }
        let (b, l, c) = (sx[0], sx[1], sx[2]);
        let k = sw[1];
        check_span("depthwise_conv1d", l, k, dilation)?;
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; b * l * c];
        for bi in 0..b {
            for t in 0..l {
                for j in 0..k {
                    let src = clamp_index(t as isize + tap_offset(j, k, dilation), l);
                    let xrow = &xd[(bi * l + src) * c..(bi * l + src + 1) * c];
                    let orow = &mut out[(bi * l + t) * c..(bi * l + t + 1) * c];
                    for ch in 0..c {
                        orow[ch] += wd[ch * k + j] * xrow[ch];
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![b, l, c], out)?, Op::DepthwiseConv1d { x, w, dilation }, rg))
    }

    /// Normalizes over the last axis to zero mean and unit population variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let n = *v.shape().last().expect("rank >= 1");
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|a| *a = (*a - mu) * inv);
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LayerNorm { x, eps }, rg)
    }

    /// First-order linear recurrence along axis 1 of `(B, L, n)` tensors:
    /// `h_t = a_t * h_{t-1} + u_t` with `h_{-1} = 0`.
    pub fn scan(&mut self, a: Var, u: Var) -> Result<Var, DiffError> {
        self.same_shape("scan", a, u)?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(DiffError::InvalidShape { context: "scan expects (B, L, n)", shape });
        }
        let (b, l, n) = (shape[0], shape[1], shape[2]);
        let (ad, ud) = (self.value(a).data(), self.value(u).data());
        let mut h = vec![0.0; ad.len()];
        for bi in 0..b {
            for t in 0..l {
                let cur = (bi * l + t) * n;
                for i in 0..n {
                    let prev = if t == 0 { 0.0 } else { h[cur - n + i] };
                    h[cur + i] = ad[cur + i] * prev + ud[cur + i];
                }
            }
        }
        let rg = self.rg(&[a, u]);
        Ok(self.push(Tensor::new(shape, h)?, Op::Scan { a, u }, rg))
    }

    /// `Re(ifft(M * fft(x)))` along axis 1 of `x (B, L, d)`, with the complex
    /// mask given as real/imag planes of shape `(L, d)`.
    pub fn spectral_filter(&mut self, x: Var, mr: Var, mi: Var) -> Result<Var, DiffError> {
        let sx = self.shape(x).to_vec();
        self.same_shape("spectral_filter", mr, mi)?;
        let sm = self.shape(mr).to_vec();
        if sx.len() != 3 || sm.len() != 2 || sm[0] != sx[1] || sm[1] != sx[2] {
            return Err(mismatch("spectral_filter", &sx, &sm));
        }
        let out = spectral_apply(self.value(x), self.value(mr).data(), self.value(mi).data(), false);
        let rg = self.rg(&[x, mr, mi]);
        Ok(self.push(Tensor::new(sx, out)?, Op::SpectralFilter { x, mr, mi }, rg))
    }

    /// Fused LSTM cell. `gates (B, 4h)` holds pre-activations in
    /// input/forget/cell/output order; returns `[h_new | c_new]` as `(B, 2h)`.
    pub fn lstm_cell(&mut self, gates: Var, c: Var) -> Result<Var, DiffError> {
        let (sg, sc) = (self.shape(gates).to_vec(), self.shape(c).to_vec());
        if sg.len() != 2 || sc.len() != 2 || sg[0] != sc[0] || sg[1] != 4 * sc[1] {
            return Err(mismatch("lstm_cell", &sg, &sc));
        }
        let (b, h) = (sc[0], sc[1]);
        let (gd, cd) = (self.value(gates).data(), self.value(c).data());
        let mut out = vec![0.0; b * 2 * h];
        for bi in 0..b {
            let g = &gd[bi * 4 * h..(bi + 1) * 4 * h];
            for j in 0..h {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[h + j]);
                let c_g = g[2 * h + j].tanh();
                let o_g = sigmoid(g[3 * h + j]);
                let c_new = f_g * cd[bi * h + j] + i_g * c_g;
                out[bi * 2 * h + j] = o_g * c_new.tanh();
                out[bi * 2 * h + h + j] = c_new;
            }
        }
        let rg = self.rg(&[gates, c]);
        Ok(self.push(Tensor::new(vec![b, 2 * h], out)?, Op::LstmCell { gates, c }, rg))
    }

    /// Elementwise Huber function with threshold `delta`.
    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        let value = self.value(x).map(|a| {
            if a.abs() <= delta {
                0.5 * a * a
            } else {
                delta * (a.abs() - 0.5 * delta)
            }
        });
        let rg = self.rg(&[x]);
        self.push(value, Op::Huber { x, delta }, rg)
    }

    /// `sqrt(re^2 + im^2)` with a zero subgradient at the origin.
    pub fn complex_abs(&mut self, re: Var, im: Var) -> Result<Var, DiffError> {
        self.binary("complex_abs", re, im, |a, b| a.hypot(b), Op::ComplexAbs { re, im })
    }

    /// Clears every adjoint so `backward` may run again.
    pub fn reset_adjoints(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Populates adjoints of every node that `root` depends on.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        if self.backward_done {
            return Err(DiffError::BackwardAlreadyRun);
        }
        let shape = self.shape(root).to_vec();
        if numel(&shape) != 1 {
            return Err(DiffError::NonScalarRoot { shape });
        }
        self.backward_done = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(g, b)| g * b).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(va).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Div(a, b) => {
                let vb = self.val(*b);
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(g, b)| g / b).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(y).zip(vb).map(|((g, y), b)| -g * y / b).collect()));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|v| v * s).collect())),
            Op::AddScalar(a) => out.push((*a, g.to_vec())),
            Op::MulScalarVar(a, s) => {
                let sv = self.val(*s)[0];
                if self.wants(*a) {
                    out.push((*a, g.iter().map(|v| v * sv).collect()));
                }
                if self.wants(*s) {
                    let gs = g.iter().zip(self.val(*a)).map(|(g, a)| g * a).sum();
                    out.push((*s, vec![gs]));
                }
            }
            Op::AddRow(a, row) => {
                let n = self.val(*row).len();
                out.push((*a, g.to_vec()));
                if self.wants(*row) {
                    let mut gr = vec![0.0; n];
                    g.iter().enumerate().for_each(|(i, v)| gr[i % n] += v);
                    out.push((*row, gr));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.val(*row);
                let n = r.len();
                if self.wants(*a) {
                    out.push((*a, g.iter().enumerate().map(|(i, v)| v * r[i % n]).collect()));
                }
                if self.wants(*row) {
                    let va = self.val(*a);
                    let mut gr = vec![0.0; n];
                    g.iter().zip(va).enumerate().for_each(|(i, (g, a))| gr[i % n] += g * a);
                    out.push((*row, gr));
                }
            }
            Op::ScaleBatch(a, w) => {
                let wv = self.val(*w);
                let inner = g.len() / wv.len();
                if self.wants(*a) {
                    out.push((*a, g.iter().enumerate().map(|(i, v)| v * wv[i / inner]).collect()));
                }
                if self.wants(*w) {
                    let va = self.val(*a);
                    let gw = (0..wv.len())
                        .map(|b| (b * inner..(b + 1) * inner).map(|i| g[i] * va[i]).sum())
                        .collect();
                    out.push((*w, gw));
                }
            }
            Op::Matmul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, self.val(*b), &mut ga, m, k, n);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(self.val(*a), g, &mut gb, m, k, n);
                    out.push((*b, gb));
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch = numel(&sa[..r - 2]);
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm_tn(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((*b, gb));
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                out.push((*a, gt.permute(&inverse).expect("valid inverse").into_data()));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Softmax(a) => {
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out_r) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        out_r[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, ga));
            }
            Op::Unary(a, kind) => {
                let x = self.val(*a);
                out.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .zip(y)
                        .map(|((g, &x), &y)| g * unary_derivative(*kind, x, y))
                        .collect(),
                ));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.val(*a).len()])),
            Op::Mean(a) => {
                let n = self.val(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.shape(*a);
                let outer = numel(&shape[..*axis]);
                let len = shape[*axis];
                let inner = numel(&shape[axis + 1..]);
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for t in 0..len {
                        for j in 0..inner {
                            ga[(o * len + t) * inner + j] = g[o * inner + j] * scale;
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer = numel(&shape[..*axis]);
                let full = shape[*axis];
                let inner = numel(&shape[axis + 1..]);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let total = shape[*axis];
                let inner = numel(&shape[axis + 1..]);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.wants(x) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((x, gx));
                    }
                    offset += len;
                }
            }
            Op::Conv1d { x, w, dilation } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (b, l, cin) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let (xd, wd) = (self.val(*x), self.val(*w));
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for t in 0..l {
                        let grow = &g[(bi * l + t) * cout..(bi * l + t + 1) * cout];
                        for j in 0..k {
                            let src = clamp_index(t as isize + tap_offset(j, k, *dilation), l);
                            let xbase = (bi * l + src) * cin;
                            for (o, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..cin {
                                    let widx = (o * cin + c) * k + j;
                                    gx[xbase + c] += gv * wd[widx];
                                    gw[widx] += gv * xd[xbase + c];
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*w, gw));
            }
            Op::DepthwiseConv1d { x, w, dilation } => {
                let sx = self.shape(*x);
                let (b, l, c) = (sx[0], sx[1], sx[2]);
                let k = self.shape(*w)[1];
                let (xd, wd) = (self.val(*x), self.val(*w));
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for t in 0..l {
                        for j in 0..k {
                            let src = clamp_index(t as isize + tap_offset(j, k, *dilation), l);
                            for ch in 0..c {
                                let gv = g[(bi * l + t) * c + ch];
                                gx[(bi * l + src) * c + ch] += gv * wd[ch * k + j];
                                gw[ch * k + j] += gv * xd[(bi * l + src) * c + ch];
                            }
                        }
                    }
                }
                out.push((*x, gx));
                out.push((*w, gw));
            }
            Op::LayerNorm { x, eps } => {
                let xd = self.val(*x);
                let n = *node.value.shape().last().expect("rank >= 1");
                let mut gx = vec![0.0; xd.len()];
                for ((xr, (gr, yr)), gxr) in xd.chunks(n).zip(g.chunks(n).zip(y.chunks(n))).zip(gx.chunks_mut(n)) {
                    let mu = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gym = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gxr[j] = inv * (gr[j] - gm - yr[j] * gym);
                    }
                }
                out.push((*x, gx));
            }
            Op::Scan { a, u } => {
                let shape = node.value.shape();
                let (b, l, n) = (shape[0], shape[1], shape[2]);
                let ad = self.val(*a);
                let mut acc = vec![0.0; g.len()];
                for bi in 0..b {
                    for t in (0..l).rev() {
                        let cur = (bi * l + t) * n;
                        for i in 0..n {
                            let carry = if t + 1 < l { ad[cur + n + i] * acc[cur + n + i] } else { 0.0 };
                            acc[cur + i] = g[cur + i] + carry;
                        }
                    }
                }
                if self.wants(*a) {
                    let mut ga = vec![0.0; g.len()];
                    for bi in 0..b {
                        for t in 1..l {
                            let cur = (bi * l + t) * n;
                            for i in 0..n {
                                ga[cur + i] = acc[cur + i] * y[cur - n + i];
                            }
                        }
                    }
                    out.push((*a, ga));
                }
                out.push((*u, acc));
            }
            Op::SpectralFilter { x, mr, mi } => {
                let shape = node.value.shape();
                let (b, l, d) = (shape[0], shape[1], shape[2]);
                let (mrd, mid) = (self.val(*mr), self.val(*mi));
                let gt = Tensor::new(shape.to_vec(), g.to_vec()).expect("grad shape");
                if self.wants(*x) {
                    out.push((*x, spectral_apply(&gt, mrd, mid, true)));
                }
                if self.wants(*mr) || self.wants(*mi) {
                    let fwd = plan(l, false);
                    let xd = self.val(*x);
                    let mut gmr = vec![0.0; l * d];
                    let mut gmi = vec![0.0; l * d];
                    let mut zx = vec![Complex64::new(0.0, 0.0); l];
                    let mut zg = vec![Complex64::new(0.0, 0.0); l];
                    for bi in 0..b {
                        for c in 0..d {
                            for t in 0..l {
                                zx[t] = Complex64::new(xd[(bi * l + t) * d + c], 0.0);
                                zg[t] = Complex64::new(g[(bi * l + t) * d + c], 0.0);
                            }
                            fwd.process(&mut zx);
                            fwd.process(&mut zg);
                            for k in 0..l {
                                let p = zg[k] * zx[k].conj() / l as f64;
                                gmr[k * d + c] += p.re;
                                gmi[k * d + c] += p.im;
                            }
                        }
                    }
                    out.push((*mr, gmr));
                    out.push((*mi, gmi));
                }
            }
            Op::LstmCell { gates, c } => {
                let sc = self.shape(*c);
                let (b, h) = (sc[0], sc[1]);
                let (gd, cd) = (self.val(*gates), self.val(*c));
                let mut gg = vec![0.0; b * 4 * h];
                let mut gc_prev = vec![0.0; b * h];
                for bi in 0..b {
                    let pre = &gd[bi * 4 * h..(bi + 1) * 4 * h];
                    for j in 0..h {
                        let i_g = sigmoid(pre[j]);
                        let f_g = sigmoid(pre[h + j]);
                        let c_g = pre[2 * h + j].tanh();
                        let o_g = sigmoid(pre[3 * h + j]);
                        let c_new = y[bi * 2 * h + h + j];
                        let tc = c_new.tanh();
                        let gh = g[bi * 2 * h + j];
                        let gc = g[bi * 2 * h + h + j] + gh * o_g * (1.0 - tc * tc);
                        let base = bi * 4 * h;
                        gg[base + j] = gc * c_g * i_g * (1.0 - i_g);
                        gg[base + h + j] = gc * cd[bi * h + j] * f_g * (1.0 - f_g);
                        gg[base + 2 * h + j] = gc * i_g * (1.0 - c_g * c_g);
                        gg[base + 3 * h + j] = gh * tc * o_g * (1.0 - o_g);
                        gc_prev[bi * h + j] = gc * f_g;
                    }
                }
                out.push((*gates, gg));
                out.push((*c, gc_prev));
            }
            Op::Huber { x, delta } => {
                let xd = self.val(*x);
                out.push((
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(g, &a)| if a.abs() <= *delta { g * a } else { g * delta * a.signum() })
                        .collect(),
                ));
            }
            Op::ComplexAbs { re, im } => {
                let (rd, idd) = (self.val(*re), self.val(*im));
                let ratio = |num: &[f64]| -> Vec<f64> {
                    g.iter()
                        .zip(num)
                        .zip(y)
                        .map(|((g, n), m)| if *m > 0.0 { g * n / m } else { 0.0 })
                        .collect()
                };
                out.push((*re, ratio(rd)));
                out.push((*im, ratio(idd)));
            }
        }
        out
    }
}
