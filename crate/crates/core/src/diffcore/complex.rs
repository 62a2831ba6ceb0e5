//! Complex tensors and the discrete Fourier transform.
//!
//! Normalization convention: the forward transform is unscaled and the
//! inverse is scaled by `1/T`, so `ifft(fft(x)) == x` and
//! `||fft(x)||_2 == sqrt(T) * ||x||_2`.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::tensor::{numel, strides};
use super::{DiffError, Tensor};

/// Complex array split into real and imaginary planes of equal shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    real: Vec<f64>,
    imag: Vec<f64>,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, real: Vec<f64>, imag: Vec<f64>) -> Result<Self, DiffError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(DiffError::InvalidShape {
                context: "complex tensor construction",
                shape,
            });
        }
        let n = numel(&shape);
        if real.len() != n || imag.len() != n {
            return Err(DiffError::DataLength {
                shape,
                len: real.len().max(imag.len()),
            });
        }
        Ok(Self { shape, real, imag })
    }

    /// Embeds a real tensor with zero imaginary part.
    pub fn from_real(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            real: t.data().to_vec(),
            imag: vec![0.0; t.numel()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn real(&self) -> &[f64] {
        &self.real
    }

    pub fn imag(&self) -> &[f64] {
        &self.imag
    }

    pub fn real_part(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.real.clone()).expect("shape already validated")
    }

    pub fn imag_part(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.imag.clone()).expect("shape already validated")
    }

    pub fn l2_norm(&self) -> f64 {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(r, i)| r * r + i * i)
            .sum::<f64>()
            .sqrt()
    }

    /// Unscaled forward DFT along `axis`.
    pub fn fft(&self, axis: usize) -> Result<Self, DiffError> {
        self.transform(axis, false)
    }

    /// Inverse DFT along `axis`, scaled by `1/T`.
    pub fn ifft(&self, axis: usize) -> Result<Self, DiffError> {
        self.transform(axis, true)
    }

    fn transform(&self, axis: usize, inverse: bool) -> Result<Self, DiffError> {
        if axis >= self.shape.len() {
            return Err(DiffError::InvalidAxis {
                op: if inverse { "ifft" } else { "fft" },
                axis,
                shape: self.shape.clone(),
            });
        }
        let len = self.shape[axis];
        let stride = strides(&self.shape)[axis];
        let outer = numel(&self.shape[..axis]);
        let fft = plan(len, inverse);
        let scale = if inverse { 1.0 / len as f64 } else { 1.0 };
        let mut out = self.clone();
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                for (t, b) in buf.iter_mut().enumerate() {
                    let i = base + t * stride;
                    *b = Complex64::new(self.real[i], self.imag[i]);
                }
                fft.process(&mut buf);
                for (t, b) in buf.iter().enumerate() {
                    let i = base + t * stride;
                    out.real[i] = b.re * scale;
                    out.imag[i] = b.im * scale;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(T^2) DFT, the oracle for the fast path.
    fn naive_dft(re: &[f64], im: &[f64], inverse: bool) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let sign = if inverse { 1.0 } else { -1.0 };
        let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
        let mut out_re = vec![0.0; n];
        let mut out_im = vec![0.0; n];
        for k in 0..n {
            for t in 0..n {
                let th = sign * 2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                out_re[k] += re[t] * th.cos() - im[t] * th.sin();
                out_im[k] += re[t] * th.sin() + im[t] * th.cos();
            }
            out_re[k] *= scale;
            out_im[k] *= scale;
        }
        (out_re, out_im)
    }

    fn random(n: usize, seed: u64) -> ComplexTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let im = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ComplexTensor::new(vec![n], re, im).unwrap()
    }

    #[test]
    fn constant_series_concentrates_in_dc() {
        let x = ComplexTensor::from_real(&Tensor::full(&[6], 2.5));
        let z = x.fft(0).unwrap();
        assert!((z.real()[0] - 15.0).abs() < 1e-12);
        for k in 1..6 {
            assert!(z.real()[k].abs() < 1e-12 && z.imag()[k].abs() < 1e-12);
        }
        assert!(z.imag()[0].abs() < 1e-12);
    }

    #[test]
    fn single_tone_hits_bins_one_and_t_minus_one() {
        let t = 12;
        let x = Tensor::from_fn(&[t], |i| (2.0 * std::f64::consts::PI * i as f64 / t as f64).cos());
        let z = ComplexTensor::from_real(&x).fft(0).unwrap();
        for k in 0..t {
            let mag = (z.real()[k].powi(2) + z.imag()[k].powi(2)).sqrt();
            if k == 1 || k == t - 1 {
                assert!((mag - t as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(mag < 1e-9, "bin {k} has {mag}");
            }
        }
    }

    #[test]
    fn matches_naive_dft_on_length_seven() {
        let x = random(7, 3);
        let z = x.fft(0).unwrap();
        let (nr, ni) = naive_dft(x.real(), x.imag(), false);
        for k in 0..7 {
            assert!((z.real()[k] - nr[k]).abs() < 1e-12);
            assert!((z.imag()[k] - ni[k]).abs() < 1e-12);
        }
        let back = z.ifft(0).unwrap();
        let (br, bi) = naive_dft(z.real(), z.imag(), true);
        for t in 0..7 {
            assert!((back.real()[t] - x.real()[t]).abs() < 1e-12);
            assert!((back.imag()[t] - x.imag()[t]).abs() < 1e-12);
            assert!((br[t] - x.real()[t]).abs() < 1e-12);
            assert!((bi[t] - x.imag()[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_parseval_over_lengths() {
        for (s, &n) in [1usize, 2, 7, 30, 64, 100].iter().enumerate() {
            let x = random(n, 10 + s as u64);
            let z = x.fft(0).unwrap();
            let back = z.ifft(0).unwrap();
            let err = x
                .real()
                .iter()
                .zip(back.real())
                .chain(x.imag().iter().zip(back.imag()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "round trip error {err} at length {n}");
            let lhs = x.l2_norm();
            let rhs = z.l2_norm() / (n as f64).sqrt();
            assert!((lhs - rhs).abs() < 1e-9, "parseval at length {n}");
        }
    }

    #[test]
    fn transforms_along_inner_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = vec![2, 5, 3];
        let n = 30;
        let re: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = ComplexTensor::new(shape.clone(), re.clone(), vec![0.0; n]).unwrap();
        let z = x.fft(1).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let lane: Vec<f64> = (0..5).map(|t| re[b * 15 + t * 3 + c]).collect();
                let (nr, ni) = naive_dft(&lane, &[0.0; 5], false);
                for k in 0..5 {
                    assert!((z.real()[b * 15 + k * 3 + c] - nr[k]).abs() < 1e-12);
                    assert!((z.imag()[b * 15 + k * 3 + c] - ni[k]).abs() < 1e-12);
                }
            }
        }
        assert!(x.fft(3).is_err());
    }
}
