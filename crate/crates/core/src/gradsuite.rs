//! Finite-difference gradient checks over every module's forward path.
//!
//! Each trial draws fresh parameters and inputs, reduces the module output to
//! a scalar with fixed random weights and compares the tape's gradient with
//! central differences for every input and parameter coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::decomp::decompose_var;
use crate::diffcore::{gradient_check_many, DiffError, GradCheckReport, Graph, Tensor, Var};
use crate::embed_encode::{BiLstm, Encoder, TokenEmbedding};
use crate::freqdom::{FrequencyBlock, WindowConfig, WindowFn};
use crate::fusion::{ensemble_combine, mixture_std, weight_regularizer_var, ComponentGate, CrossChannelAttention, EnsembleGate};
use crate::heads::{composite_objective_var, nll_loss_var, point_loss_var, LossWeights, PointLoss, TemporalProjection, TermVars, UncertaintyHead};
use crate::msconv::MultiScaleConv;
use crate::params::{uniform, Bound, ParamStore};
use crate::ssm::MambaBlock;

pub const SUITE_MODULES: [&str; 9] = [
    "decomp", "embed", "encoder", "bilstm", "mamba", "msconv", "freqdom", "fusion", "heads",
];
pub const SUITE_EPS: f64 = 1e-4;
pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_TRIALS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradSuiteError {
    #[error("unknown module `{0}`; expected one of {SUITE_MODULES:?}")]
    UnknownModule(String),
    #[error("{module} trial {trial}: {source}")]
    Check {
        module: String,
        trial: usize,
        source: DiffError,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleReport {
    pub module: String,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_trial: usize,
    pub passed: bool,
}

fn wrap<E: std::fmt::Display>(e: E) -> DiffError {
    DiffError::InvalidArgument(e.to_string())
}

/// `sum(y * w)` with `w` drawn from `seed`, so repeated evaluations agree.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(uniform(&mut rng, &shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn weighted_total(g: &mut Graph, ys: &[Var], seed: u64) -> Result<Var, DiffError> {
    let mut total = weighted_sum(g, ys[0], seed)?;
    for (i, &y) in ys.iter().enumerate().skip(1) {
        let s = weighted_sum(g, y, seed.wrapping_add(i as u64))?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Checks `f(g, params, data)` over the data tensors and every parameter.
fn param_check<F>(store: &ParamStore, data: Vec<Tensor>, weight_seed: u64, f: F) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Vec<Var>, DiffError>,
{
    let n = data.len();
    let mut inputs = data;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    gradient_check_many(
        |g, v| {
            let p = Bound::from_vars(v[n..].to_vec());
            let ys = f(g, &p, &v[..n])?;
            weighted_total(g, &ys, weight_seed)
        },
        &inputs,
        SUITE_EPS,
    )
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0)
}

fn trial(module: &str, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, DiffError> {
    let mut store = ParamStore::new();
    let ws: u64 = rng.gen();
    match module {
        "decomp" => {
            let x = input(rng, &[2, 12, 3]);
            param_check(&store, vec![x], ws, |g, _, v| {
                let (trend, seasonal) = decompose_var(g, v[0], 5).map_err(wrap)?;
                Ok(vec![trend, seasonal])
            })
        }
        "embed" => {
            let emb = TokenEmbedding::new(&mut store, "embed", rng, 3, 8);
            let x = input(rng, &[2, 10, 3]);
            param_check(&store, vec![x], ws, |g, p, v| Ok(vec![emb.forward(g, p, v[0]).map_err(wrap)?]))
        }
        "encoder" => {
            let enc = Encoder::new(&mut store, "encoder", rng, 8, 2, 1, 16).map_err(wrap)?;
            let x = input(rng, &[2, 6, 8]);
            param_check(&store, vec![x], ws, |g, p, v| Ok(vec![enc.forward(g, p, v[0]).map_err(wrap)?]))
        }
        "bilstm" => {
            let lstm = BiLstm::new(&mut store, "bilstm", rng, 6).map_err(wrap)?;
            let x = input(rng, &[2, 5, 6]);
            param_check(&store, vec![x], ws, |g, p, v| Ok(vec![lstm.forward(g, p, v[0]).map_err(wrap)?]))
        }
        "mamba" => {
            let mamba = MambaBlock::new(&mut store, "mamba", rng, 4, 3);
            let x = input(rng, &[2, 8, 4]);
            param_check(&store, vec![x], ws, |g, p, v| {
                let y = mamba.forward(g, p, v[0]).map_err(wrap)?;
                let pen = mamba.stability_penalty_var(g, p)?;
                Ok(vec![y, pen])
            })
        }
        "msconv" => {
            let ms = MultiScaleConv::new(&mut store, "msconv", rng, 4, &[3, 5, 7], &[1, 2]);
            let x = input(rng, &[2, 12, 4]);
            param_check(&store, vec![x], ws, |g, p, v| Ok(vec![ms.forward(g, p, v[0]).map_err(wrap)?]))
        }
        "freqdom" => {
            let configs = [
                WindowConfig {
                    window: WindowFn::Rect,
                    segment: None,
                },
                WindowConfig {
                    window: WindowFn::Hann,
                    segment: Some(4),
                },
            ];
            let block = FrequencyBlock::new(&mut store, "freq", rng, 8, 3, 2.0, &configs).map_err(wrap)?;
            let x = input(rng, &[2, 8, 3]);
            param_check(&store, vec![x], ws, |g, p, v| {
                let y = block.forward(g, p, v[0]).map_err(wrap)?;
                let reg = block.regularizer_var(g, p, 1e-1, 1e-1)?;
                Ok(vec![y, reg])
            })
        }
        "fusion" => {
            let cross = CrossChannelAttention::new(&mut store, "cross", rng, 4, 3);
            let gate = ComponentGate::new(&mut store, "gate", rng, 4);
            let ens = EnsembleGate::new(&mut store, "ensemble", rng, 4, 3, 5);
            let h = input(rng, &[2, 5, 3, 4]);
            let seasonal = input(rng, &[2, 5, 4]);
            let trend = input(rng, &[2, 5, 4]);
            let feats = input(rng, &[2, 2, 12]);
            let preds = input(rng, &[2, 2, 3]);
            let scales = Tensor::from_fn(&[2, 2, 3], |_| rng.gen_range(0.5..1.5));
            param_check(&store, vec![h, seasonal, trend, feats, preds, scales], ws, |g, p, v| {
                let (mixed, alpha) = cross.forward(g, p, v[0])?;
                let fused = gate.forward(g, p, v[1], v[2])?;
                let features: Vec<Var> = (0..3).map(|m| g.slice(v[3], 2, 4 * m, 4)).collect::<Result<_, _>>()?;
                let w = ens.weights(g, p, &features).map_err(wrap)?;
                let column = |g: &mut Graph, x: Var, m: usize| -> Result<Var, DiffError> {
                    let s = g.slice(x, 2, m, 1)?;
                    g.reshape(s, &[2, 2])
                };
                let means: Vec<Var> = (0..3).map(|m| column(g, v[4], m)).collect::<Result<_, _>>()?;
                let stds: Vec<Var> = (0..3).map(|m| column(g, v[5], m)).collect::<Result<_, _>>()?;
                let mean = ensemble_combine(g, &means, w).map_err(wrap)?;
                let std = mixture_std(g, &means, &stds, w, mean).map_err(wrap)?;
                let reg = weight_regularizer_var(g, w, 0.3, 0.3)?;
                Ok(vec![mixed, alpha, fused, w, mean, std, reg])
            })
        }
        "heads" => {
            let proj = TemporalProjection::new(&mut store, "proj", rng, 6, 2);
            let head = UncertaintyHead::new(&mut store, "head", rng, 4, true);
            // the scale starts input-independent; perturb it so the check sees every path
            let sig = head.scale.clone().expect("scale head requested");
            *store.get_mut(sig.w) = uniform(rng, &[4, 1], 0.5);
            let h = input(rng, &[2, 6, 4]);
            let y = Tensor::from_fn(&[2, 2], |_| rng.gen_range(-3.0..3.0));
            let weights = LossWeights {
                sigma: 0.1,
                ..LossWeights::default()
            };
            param_check(&store, vec![h, y], ws, |g, p, v| {
                let z = proj.forward(g, p, v[0])?;
                let (mu, sigma) = head.forward(g, p, z)?;
                let sigma = sigma.expect("scale head requested");
                let point = point_loss_var(g, PointLoss::Huber, v[1], mu, 0.7)?;
                let nll = nll_loss_var(g, v[1], mu, sigma)?;
                let sigma_mean = g.mean(sigma);
                let terms = TermVars {
                    point: Some(point),
                    nll: Some(nll),
                    sigma_mean: Some(sigma_mean),
                    ..TermVars::default()
                };
                let total = composite_objective_var(g, &terms, &weights).map_err(wrap)?;
                Ok(vec![mu, sigma, total])
            })
        }
        other => Err(DiffError::InvalidArgument(format!("unknown module `{other}`"))),
    }
}

/// Runs `trials` independent checks of one module.
pub fn check_module(module: &str, trials: usize, seed: u64) -> Result<ModuleReport, GradSuiteError> {
    let Some(index) = SUITE_MODULES.iter().position(|m| *m == module) else {
        return Err(GradSuiteError::UnknownModule(module.to_string()));
    };
    let mut report = ModuleReport {
        module: module.to_string(),
        trials,
        coordinates: 0,
        max_rel_error: 0.0,
        worst_trial: 0,
        passed: true,
    };
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((index * 1000 + t) as u64);
        let r = trial(module, &mut rng).map_err(|source| GradSuiteError::Check {
            module: module.to_string(),
            trial: t,
            source,
        })?;
        report.coordinates += r.coordinates;
        if r.max_rel_error > report.max_rel_error {
            report.max_rel_error = r.max_rel_error;
            report.worst_trial = t;
        }
    }
    report.passed = report.max_rel_error < SUITE_TOLERANCE;
    Ok(report)
}

/// Every module in [`SUITE_MODULES`] order.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<ModuleReport>, GradSuiteError> {
    SUITE_MODULES.iter().map(|m| check_module(m, trials, seed)).collect()
}
