//! Central finite-difference checks of the tape's analytic gradients.

use super::{DiffError, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(DiffError::NonScalarRoot { shape: v.shape().to_vec() });
    }
    Ok(v.item())
}

/// Checks every coordinate of every input of a scalar function.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(DiffError::InvalidArgument(format!("gradient_check: eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_finite() {
        return Err(DiffError::NonFinite {
            context: "gradient_check forward",
            input: 0,
            coordinate: 0,
        });
    }
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coordinate: 0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for c in 0..grad.numel() {
            let orig = inputs[i].data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = orig;
            let a = grad.data()[c];
            if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
                return Err(DiffError::NonFinite {
                    context: "gradient_check",
                    input: i,
                    coordinate: c,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_coordinate = c;
            }
        }
    }
    Ok(report)
}

/// Single-input form: returns the max relative error.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, DiffError>,
{
    gradient_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Unary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-4;
    const TOL: f64 = 1e-4;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Reduces any output to a scalar with fixed random weights so that every
    /// output coordinate contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, DiffError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.shape(y).to_vec();
        let w = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    fn check_many<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
    {
        for trial in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
            let r = gradient_check_many(
                |g, v| {
                    let y = f(g, v)?;
                    weighted_sum(g, y, 77 + trial)
                },
                &inputs,
                EPS,
            )
            .unwrap();
            assert!(r.max_rel_error < TOL, "{name} trial {trial}: {r:?}");
        }
    }

    #[test]
    fn square_at_three() {
        let err = gradient_check(|g, x| Ok(g.square(x)), &Tensor::scalar(3.0), 1e-3).unwrap();
        assert!(err < 1e-7);
    }

    #[test]
    fn rejects_eps_out_of_range() {
        assert!(gradient_check(|g, x| Ok(g.square(x)), &Tensor::scalar(1.0), 1e-2).is_err());
        assert!(gradient_check(|g, x| Ok(g.square(x)), &Tensor::scalar(1.0), 1e-9).is_err());
    }

    #[test]
    fn reports_non_finite_coordinate() {
        let x = Tensor::from_vec(vec![1.0, 0.0]);
        let err = gradient_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum(l))
            },
            &x,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { .. }));
    }

    #[test]
    fn mse_of_linear_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[8, 3], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[8, 1], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 1], -1.0, 1.0);
        let err = gradient_check(
            |g, w| {
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                let p = g.matmul(xv, w)?;
                let d = g.sub(p, yv)?;
                let s = g.square(d);
                Ok(g.mean(s))
            },
            &w,
            EPS,
        )
        .unwrap();
        assert!(err < TOL);
    }

    #[test]
    fn elementwise_binary_ops() {
        check_many("add", &[&[3, 4], &[3, 4]], -2.0, 2.0, |g, v| g.add(v[0], v[1]));
        check_many("sub", &[&[3, 4], &[3, 4]], -2.0, 2.0, |g, v| g.sub(v[0], v[1]));
        check_many("mul", &[&[3, 4], &[3, 4]], -2.0, 2.0, |g, v| g.mul(v[0], v[1]));
        check_many("div", &[&[3, 4], &[3, 4]], 0.5, 2.0, |g, v| g.div(v[0], v[1]));
        check_many("mul_scalar_var", &[&[2, 3], &[1]], -2.0, 2.0, |g, v| g.mul_scalar_var(v[0], v[1]));
        check_many("add_row", &[&[2, 3, 4], &[4]], -2.0, 2.0, |g, v| g.add_row(v[0], v[1]));
        check_many("mul_row", &[&[2, 3, 4], &[4]], -2.0, 2.0, |g, v| g.mul_row(v[0], v[1]));
        check_many("scale_batch", &[&[3, 2, 2], &[3]], -2.0, 2.0, |g, v| g.scale_batch(v[0], v[1]));
        check_many("scale/add_scalar", &[&[5]], -2.0, 2.0, |g, v| {
            let s = g.scale(v[0], -1.7);
            Ok(g.add_scalar(s, 0.3))
        });
    }

    #[test]
    fn unary_ops() {
        for kind in [
            Unary::Softplus,
            Unary::Sigmoid,
            Unary::Tanh,
            Unary::Exp,
            Unary::Gelu,
            Unary::Square,
            Unary::Neg,
        ] {
            check_many(kind.name(), &[&[2, 5]], -2.0, 2.0, move |g, v| Ok(g.unary(v[0], kind)));
        }
        for kind in [Unary::Log, Unary::Sqrt, Unary::Recip, Unary::Relu] {
            check_many(kind.name(), &[&[2, 5]], 0.3, 2.0, move |g, v| Ok(g.unary(v[0], kind)));
        }
        check_many("relu negative side", &[&[6]], -2.0, -0.3, |g, v| Ok(g.relu(v[0])));
    }

    #[test]
    fn linear_algebra_ops() {
        check_many("matmul", &[&[2, 3, 4], &[4, 5]], -1.0, 1.0, |g, v| g.matmul(v[0], v[1]));
        check_many("bmm", &[&[2, 3, 4], &[2, 4, 2]], -1.0, 1.0, |g, v| g.bmm(v[0], v[1]));
        check_many("transpose", &[&[2, 3, 4]], -1.0, 1.0, |g, v| g.transpose(v[0]));
        check_many("permute", &[&[2, 3, 4]], -1.0, 1.0, |g, v| g.permute(v[0], &[2, 0, 1]));
        check_many("reshape", &[&[2, 3, 4]], -1.0, 1.0, |g, v| g.reshape(v[0], &[6, 4]));
    }

    #[test]
    fn reductions_and_structure() {
        check_many("softmax", &[&[3, 5]], -2.0, 2.0, |g, v| Ok(g.softmax(v[0])));
        check_many("sum", &[&[3, 5]], -2.0, 2.0, |g, v| Ok(g.sum(v[0])));
        check_many("mean", &[&[3, 5]], -2.0, 2.0, |g, v| Ok(g.mean(v[0])));
        for axis in 0..3 {
            check_many("sum_axis", &[&[2, 3, 4]], -2.0, 2.0, move |g, v| g.sum_axis(v[0], axis));
            check_many("mean_axis", &[&[2, 3, 4]], -2.0, 2.0, move |g, v| g.mean_axis(v[0], axis));
        }
        check_many("slice", &[&[2, 5, 3]], -2.0, 2.0, |g, v| g.slice(v[0], 1, 1, 3));
        check_many("concat", &[&[2, 2, 3], &[2, 1, 3]], -2.0, 2.0, |g, v| g.concat(&[v[0], v[1]], 1));
        check_many("layer_norm", &[&[3, 6]], -2.0, 2.0, |g, v| Ok(g.layer_norm(v[0], 1e-5)));
    }

    #[test]
    fn convolutions() {
        for dilation in [1, 2] {
            check_many("conv1d", &[&[2, 7, 3], &[4, 3, 3]], -1.0, 1.0, move |g, v| g.conv1d(v[0], v[1], dilation));
            check_many("depthwise_conv1d", &[&[2, 7, 3], &[3, 5]], -1.0, 1.0, move |g, v| {
                g.depthwise_conv1d(v[0], v[1], dilation)
            });
        }
    }

    #[test]
    fn fused_ops() {
        check_many("scan", &[&[2, 6, 3], &[2, 6, 3]], -0.9, 0.9, |g, v| g.scan(v[0], v[1]));
        check_many("spectral_filter", &[&[2, 7, 3], &[7, 3], &[7, 3]], -1.0, 1.0, |g, v| {
            g.spectral_filter(v[0], v[1], v[2])
        });
        check_many("lstm_cell", &[&[2, 8], &[2, 2]], -1.5, 1.5, |g, v| g.lstm_cell(v[0], v[1]));
        check_many("huber", &[&[12]], -3.0, 3.0, |g, v| Ok(g.huber(v[0], 1.0)));
        check_many("complex_abs", &[&[2, 4], &[2, 4]], -1.0, 1.0, |g, v| g.complex_abs(v[0], v[1]));
    }
}
