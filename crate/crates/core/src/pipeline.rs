//! Training, evaluation, the ablation runner and rolling forecasts.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::diffcore::{Graph, Tensor};
use crate::heads::{calibration_check, metrics, Calibration, LossTerms, Metrics};
use crate::model::{ablation_variant, canonical_variant, ChannelLayout, Model, ModelConfig, ModelError};
use crate::params::ParamStore;
use crate::preprocess::{
    chronological_split, fit_norm, make_windows, NormStats, PreprocessError, TimeSeriesFrame, Timestamp, WindowBatch,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for `{param}`")]
    NonFiniteGradient { param: String },
    #[error("window leakage: {0}")]
    Leakage(String),
    #[error("frame has {len} rows, fewer than the window length {window}")]
    FrameTooShort { len: usize, window: usize },
    #[error("metrics: {0}")]
    Metrics(#[from] crate::heads::HeadError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// Process exit code: 2 for data problems, 3 for numeric failures,
    /// 1 for everything the caller got wrong.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Data(_) | PipelineError::FrameTooShort { .. } | PipelineError::Leakage(_) | PipelineError::Io(_) => 2,
            PipelineError::Model(ModelError::Layout(_)) => 2,
            PipelineError::NonFiniteLoss { .. } | PipelineError::NonFiniteGradient { .. } | PipelineError::Metrics(_) => 3,
            PipelineError::Model(ModelError::Stage { .. }) => 3,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_early: usize,
    pub patience_plateau: usize,
    pub plateau_factor: f64,
    pub min_delta: f64,
    pub seeds: Vec<u64>,
    pub stride: usize,
    pub split: [f64; 3],
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience_early: 15,
            patience_plateau: 5,
            plateau_factor: 0.5,
            min_delta: 1e-6,
            seeds: (0..5).collect(),
            stride: 1,
            split: [0.6, 0.2, 0.2],
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.stride == 0 {
            return fail("batch_size, max_epochs and stride must be positive");
        }
        if self.patience_early == 0 || self.patience_plateau == 0 {
            return fail("patience values must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail("plateau_factor must lie in (0, 1)");
        }
        if !(self.min_delta >= 0.0) {
            return fail("min_delta must be non-negative");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return fail("grad_clip must be finite and non-negative");
        }
        Ok(())
    }
}

/// Model and training settings as one flat key-value document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn keys_of<T: Serialize>(v: &T) -> BTreeSet<String> {
    match serde_json::to_value(v).expect("config serializes") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("configs are structs"),
    }
}

impl RunConfig {
    /// Parses a flat JSON object; missing keys take defaults, unknown keys
    /// are rejected.
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let value: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(PipelineError::Config("config must be a JSON object".into()));
        };
        let model_keys = keys_of(&ModelConfig::default());
        let train_keys = keys_of(&TrainConfig::default());
        let (mut m, mut t) = (Map::new(), Map::new());
        for (k, v) in map {
            if model_keys.contains(&k) {
                m.insert(k, v);
            } else if train_keys.contains(&k) {
                t.insert(k, v);
            } else {
                return Err(PipelineError::Config(format!("unknown key `{k}`")));
            }
        }
        let cfg = Self {
            model: serde_json::from_value(Value::Object(m)).map_err(|e| PipelineError::Config(e.to_string()))?,
            train: serde_json::from_value(Value::Object(t)).map_err(|e| PipelineError::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for part in [serde_json::to_value(&self.model), serde_json::to_value(&self.train)] {
            if let Value::Object(m) = part.expect("config serializes") {
                map.extend(m);
            }
        }
        Value::Object(map)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Non-finite gradients leave parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<(), PipelineError> {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let id = store.ids().nth(i).expect("index in range");
            return Err(PipelineError::NonFiniteGradient {
                param: store.name(id).to_string(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for (i, &g) in grads[k].data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// What the validation monitor decided after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonitorAction {
    pub improved: bool,
    pub lr_drop: bool,
    pub stop: bool,
}

/// Plateau learning-rate schedule plus early stopping on validation loss.
#[derive(Clone, Debug)]
pub struct Monitor {
    pub best: f64,
    pub min_delta: f64,
    pub patience_plateau: usize,
    pub patience_early: usize,
    since_best: usize,
    since_drop: usize,
}

impl Monitor {
    pub fn new(min_delta: f64, patience_plateau: usize, patience_early: usize) -> Self {
        Self {
            best: f64::INFINITY,
            min_delta,
            patience_plateau,
            patience_early,
            since_best: 0,
            since_drop: 0,
        }
    }

    pub fn observe(&mut self, val: f64) -> MonitorAction {
        let improved = val < self.best - self.min_delta;
        if improved {
            self.best = val;
            self.since_best = 0;
            self.since_drop = 0;
        } else {
            self.since_best += 1;
            self.since_drop += 1;
        }
        let lr_drop = self.since_drop >= self.patience_plateau;
        if lr_drop {
            self.since_drop = 0;
        }
        MonitorAction {
            improved,
            lr_drop,
            stop: self.since_best >= self.patience_early,
        }
    }
}

/// Normalized partitions and their windows.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub layout: ChannelLayout,
    pub norm: NormStats,
    pub bounds: [usize; 4],
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub test: WindowBatch,
}

/// Chronological split, train-fit normalization, and windows that lie
/// wholly inside their own partition.
pub fn prepare(frame: &TimeSeriesFrame, model: &ModelConfig, train: &TrainConfig) -> Result<Prepared, PipelineError> {
    let layout = ChannelLayout::from_frame(frame, &model.modalities)?;
    let need = model.window + model.horizon;
    let (tr, va, te) = chronological_split(frame, (train.split[0], train.split[1], train.split[2]), need)?;
    let norm = fit_norm(&tr);
    let idx = layout.input_indices(frame)?;
    let win = |f: &TimeSeriesFrame| -> Result<WindowBatch, PipelineError> {
        Ok(make_windows(&norm.apply_frame(f)?, &idx, model.window, model.horizon, train.stride)?)
    };
    let prepared = Prepared {
        bounds: [tr.origin(), va.origin(), te.origin(), te.origin() + te.len()],
        train: win(&tr)?,
        val: win(&va)?,
        test: win(&te)?,
        layout,
        norm,
    };
    leakage_audit(&prepared, need)?;
    Ok(prepared)
}

/// Every window, targets included, must sit inside its own partition.
pub fn leakage_audit(p: &Prepared, span: usize) -> Result<(), PipelineError> {
    for (k, (name, w)) in [("train", &p.train), ("validation", &p.val), ("test", &p.test)].iter().enumerate() {
        let (lo, hi) = (p.bounds[k], p.bounds[k + 1]);
        if let Some(&s) = w.starts.iter().find(|&&s| s < lo || s + span > hi) {
            return Err(PipelineError::Leakage(format!(
                "{name} window at row {s} spans [{s}, {}) outside [{lo}, {hi})",
                s + span
            )));
        }
    }
    Ok(())
}

fn batch_grads(model: &Model, batch: &WindowBatch) -> Result<(f64, LossTerms, Vec<Tensor>), ModelError> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let x = g.constant(batch.inputs.clone());
    let y = g.constant(batch.targets.clone());
    let out = model.forward(&mut g, &p, x)?;
    let (loss, terms) = model.objective(&mut g, &p, &out, y)?;
    let value = g.value(loss).item();
    let terms = terms.values(&g);
    if !value.is_finite() {
        return Ok((value, terms, Vec::new()));
    }
    g.backward(loss).map_err(|e| ModelError::Stage {
        stage: "backward".into(),
        message: e.to_string(),
    })?;
    let grads = p.vars().iter().map(|&v| g.grad(v)).collect();
    Ok((value, terms, grads))
}

/// Data-fit part of the objective on a window set:
/// `lambda_point * point + lambda_nll * nll`, averaged per window.
pub fn validation_loss(model: &Model, data: &WindowBatch) -> Result<f64, PipelineError> {
    let w = model.config.loss_weights();
    let mut total = 0.0;
    let mut start = 0;
    while start < data.len() {
        let n = 256.min(data.len() - start);
        let chunk = data.select(&(start..start + n).collect::<Vec<_>>());
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g);
        let x = g.constant(chunk.inputs);
        let y = g.constant(chunk.targets);
        let out = model.forward(&mut g, &p, x)?;
        let (_, t) = model.objective(&mut g, &p, &out, y)?;
        let t = t.values(&g);
        total += n as f64 * (w.point * t.point + w.nll * t.nll);
        start += n;
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub skipped_steps: usize,
    pub test: Metrics,
    pub calibration: Option<Calibration>,
}

/// Trained model (best validation weights restored) and its report.
pub struct SeedRun {
    pub model: Model,
    pub report: SeedReport,
}

/// Predictions for a window set, denormalized to data units, alongside the
/// denormalized targets.
pub fn predict_denorm(model: &Model, data: &WindowBatch) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>), PipelineError> {
    let norm = model
        .norm
        .as_ref()
        .ok_or_else(|| PipelineError::Config("model has no normalization stats".into()))?;
    let ti = norm
        .index_of(&model.layout.target)
        .ok_or_else(|| PipelineError::Config("normalization stats lack the target".into()))?;
    let (mean, std) = model.predict_normalized(&data.inputs)?;
    let y = data.targets.data().iter().map(|&v| norm.denorm_value(ti, v)).collect();
    let mu = mean.iter().map(|&v| norm.denorm_value(ti, v)).collect();
    let sd = std.map(|s| s.iter().map(|&v| norm.denorm_std(ti, v)).collect());
    Ok((y, mu, sd))
}

/// Test metrics and, with a scale head and enough points, the KS check.
pub fn evaluate(model: &Model, data: &WindowBatch) -> Result<(Metrics, Option<Calibration>), PipelineError> {
    let (y, mu, sd) = predict_denorm(model, data)?;
    let m = metrics(&y, &mu)?;
    let cal = match sd {
        Some(sd) if y.len() >= 30 => Some(calibration_check(&y, &mu, &sd, 0.01)?),
        _ => None,
    };
    Ok((m, cal))
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling. Non-finite norms are left for the optimizer to reject.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Trains one seed.
pub fn train_seed(prepared: &Prepared, model_cfg: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<SeedRun, PipelineError> {
    cfg.validate()?;
    let mut model = Model::new(model_cfg.clone(), prepared.layout.clone(), seed)?;
    model.norm = Some(prepared.norm.clone());
    model.project_constraints();
    let mut adam = Adam::new(&model.store, cfg.lr);
    let mut monitor = Monitor::new(cfg.min_delta, cfg.patience_plateau, cfg.patience_early);
    let n = prepared.train.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(seed);
    let mut best = model.store.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut skipped = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        shuffler.set_stream(epoch as u64);
        shuffler.set_word_pos(0);
        order.sort_unstable();
        order.shuffle(&mut shuffler);
        let mut train_loss = 0.0;
        let mut terms = LossTerms::default();
        for (bi, rows) in order.chunks(bs).enumerate() {
            let batch = prepared.train.select(rows);
            let (loss, t, mut grads) = batch_grads(&model, &batch)?;
            if !loss.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch, batch: bi });
            }
            let frac = rows.len() as f64 / n as f64;
            train_loss += frac * loss;
            terms.add(&t, frac);
            if cfg.grad_clip > 0.0 {
                clip_global_norm(&mut grads, cfg.grad_clip);
            }
            match adam.step(&mut model.store, &grads) {
                Ok(()) => model.project_constraints(),
                Err(PipelineError::NonFiniteGradient { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let val_loss = validation_loss(&model, &prepared.val)?;
        if !val_loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        epochs.push(EpochLog {
            epoch,
            lr: adam.lr,
            train_loss,
            val_loss,
            terms,
        });
        let action = monitor.observe(val_loss);
        if action.improved {
            best = model.store.clone();
            best_epoch = epoch;
        }
        if action.lr_drop {
            adam.lr *= cfg.plateau_factor;
        }
        if action.stop {
            stopped_early = true;
            break;
        }
    }
    model.store = best;
    let (test, calibration) = evaluate(&model, &prepared.test)?;
    Ok(SeedRun {
        report: SeedReport {
            seed,
            epochs,
            best_epoch,
            best_val: monitor.best,
            stopped_early,
            skipped_steps: skipped,
            test,
            calibration,
        },
        model,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub rmse: f64,
    pub mape_pct: f64,
    pub r2: f64,
}

/// Arithmetic mean and population standard deviation across seeds.
pub fn summarize(ms: &[Metrics]) -> (MetricSummary, MetricSummary) {
    let n = ms.len() as f64;
    let pick: [fn(&Metrics) -> f64; 4] = [|m| m.mae, |m| m.rmse, |m| m.mape_pct, |m| m.r2];
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    for k in 0..4 {
        mean[k] = ms.iter().map(pick[k]).sum::<f64>() / n;
        std[k] = (ms.iter().map(|m| (pick[k](m) - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
    }
    let mk = |v: [f64; 4]| MetricSummary {
        mae: v[0],
        rmse: v[1],
        mape_pct: v[2],
        r2: v[3],
    };
    (mk(mean), mk(std))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: Value,
    pub param_count: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
    pub wall_clock_secs: f64,
}

/// Trains every configured seed; returns the report and the model of the
/// seed with the best validation loss.
pub fn run(frame: &TimeSeriesFrame, cfg: &RunConfig) -> Result<(RunReport, Model), PipelineError> {
    cfg.validate()?;
    let clock = Instant::now();
    let prepared = prepare(frame, &cfg.model, &cfg.train)?;
    let mut reports = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    for &seed in &cfg.train.seeds {
        let r = train_seed(&prepared, &cfg.model, &cfg.train, seed)?;
        if best.as_ref().map_or(true, |(v, _)| r.report.best_val < *v) {
            best = Some((r.report.best_val, r.model));
        }
        reports.push(r.report);
    }
    let (_, model) = best.expect("at least one seed");
    let tests: Vec<Metrics> = reports.iter().map(|r| r.test).collect();
    let (mean, std) = summarize(&tests);
    Ok((
        RunReport {
            config: cfg.to_json(),
            param_count: model.count_params(),
            seeds: cfg.train.seeds.clone(),
            per_seed: reports,
            mean,
            std,
            wall_clock_secs: clock.elapsed().as_secs_f64(),
        },
        model,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub mean: MetricSummary,
    pub std: MetricSummary,
    pub per_seed_r2: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Trains each variant on each seed. A failing variant is reported in its
/// row and does not stop the suite.
pub fn run_ablation_suite(frame: &TimeSeriesFrame, base: &RunConfig, variants: &[String]) -> Result<AblationReport, PipelineError> {
    base.train.validate()?;
    let mut rows = Vec::new();
    for name in variants {
        let label = canonical_variant(name).map_or(name.clone(), str::to_string);
        let attempt = || -> Result<AblationRow, PipelineError> {
            let model = ablation_variant(&base.model, name)?;
            let cfg = RunConfig {
                model,
                train: base.train.clone(),
            };
            let (report, m) = run(frame, &cfg)?;
            Ok(AblationRow {
                variant: label.clone(),
                params: m.count_params(),
                mean: report.mean,
                std: report.std,
                per_seed_r2: report.per_seed.iter().map(|r| r.test.r2).collect(),
                error: None,
            })
        };
        rows.push(attempt().unwrap_or_else(|e| AblationRow {
            variant: label.clone(),
            params: 0,
            mean: MetricSummary::default(),
            std: MetricSummary::default(),
            per_seed_r2: Vec::new(),
            error: Some(e.to_string()),
        }));
    }
    Ok(AblationReport {
        seeds: base.train.seeds.clone(),
        rows,
    })
}

impl AblationReport {
    /// Columns: `variant,mae,rmse,r2,r2_std,params,error`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PipelineError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["variant", "mae", "rmse", "r2", "r2_std", "params", "error"])
            .map_err(PreprocessError::from)?;
        for r in &self.rows {
            out.write_record([
                r.variant.clone(),
                r.mean.mae.to_string(),
                r.mean.rmse.to_string(),
                r.mean.r2.to_string(),
                r.std.r2.to_string(),
                r.params.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(PreprocessError::from)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<30} {:>10} {:>10} {:>8} {:>10}\n", "variant", "MAE", "RMSE", "R2", "params");
        for r in &self.rows {
            match &r.error {
                None => s += &format!(
                    "{:<30} {:>10.4} {:>10.4} {:>8.4} {:>10}\n",
                    r.variant, r.mean.mae, r.mean.rmse, r.mean.r2, r.params
                ),
                Some(e) => s += &format!("{:<30} failed: {e}\n", r.variant),
            }
        }
        s
    }
}

/// One emitted forecast row.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRow {
    pub timestamp: Timestamp,
    pub step: usize,
    pub y_true: Option<f64>,
    pub mean: f64,
    pub std: Option<f64>,
}

/// Rolling forecasts: one window ending at every row from `L - 1` to the
/// last, each predicting the next `H` rows. Rows past the end of the frame
/// get extrapolated timestamps and no `y_true`.
pub fn forecast_frame(model: &Model, frame: &TimeSeriesFrame) -> Result<Vec<ForecastRow>, PipelineError> {
    let l = model.config.window;
    let h = model.config.horizon;
    if frame.len() < l {
        return Err(PipelineError::FrameTooShort { len: frame.len(), window: l });
    }
    let idx = model.layout.input_indices(frame)?;
    let norm = model
        .norm
        .as_ref()
        .ok_or_else(|| PipelineError::Config("model has no normalization stats".into()))?;
    let normed = norm.apply_frame(frame)?;
    let count = frame.len() - l + 1;
    let d = idx.len();
    let mut x = Vec::with_capacity(count * l * d);
    for s in 0..count {
        for t in s..s + l {
            x.extend(idx.iter().map(|&c| normed.channels()[c].values[t]));
        }
    }
    let inputs = Tensor::new(vec![count, l, d], x).map_err(|e| PipelineError::Config(e.to_string()))?;
    let results = model.forecast(&inputs)?;
    let target = &frame.target().values;
    let mut rows = Vec::with_capacity(count * h);
    for (s, r) in results.iter().enumerate() {
        for k in 0..h {
            let row = s + l + k;
            rows.push(ForecastRow {
                timestamp: if row < frame.len() {
                    frame.timestamps()[row]
                } else {
                    frame.future_timestamp(row + 1 - frame.len())
                },
                step: k + 1,
                y_true: target.get(row).copied(),
                mean: r.mean[k],
                std: r.std.get(k).copied(),
            });
        }
    }
    Ok(rows)
}

/// Columns `timestamp,y_true,y_mean,y_std`, plus `step` when `H > 1`.
/// Missing values are empty cells.
pub fn write_forecast_csv<W: Write>(rows: &[ForecastRow], horizon: usize, w: W) -> Result<(), PipelineError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["timestamp"];
    if horizon > 1 {
        header.push("step");
    }
    header.extend(["y_true", "y_mean", "y_std"]);
    out.write_record(&header).map_err(PreprocessError::from)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![r.timestamp.to_string()];
        if horizon > 1 {
            rec.push(r.step.to_string());
        }
        rec.extend([opt(r.y_true), r.mean.to_string(), opt(r.std)]);
        out.write_record(&rec).map_err(PreprocessError::from)?;
    }
    out.flush()?;
    Ok(())
}

/// Loss curves as CSV: `seed,epoch,lr,train_loss,val_loss`.
pub fn write_curves_csv<W: Write>(report: &RunReport, w: W) -> Result<(), PipelineError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seed", "epoch", "lr", "train_loss", "val_loss"])
        .map_err(PreprocessError::from)?;
    for s in &report.per_seed {
        for e in &s.epochs {
            out.write_record([
                s.seed.to_string(),
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
            ])
            .map_err(PreprocessError::from)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{synth_generate, SynthSpec};

    #[test]
    fn clipping_rescales_only_above_the_ceiling() {
        // joint norm of (3, 4) and (12) is 13
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0]), Tensor::from_vec(vec![12.0])];
        assert_eq!(clip_global_norm(&mut g, 26.0), 13.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.3), 13.0);
        assert!((g[0].data()[1] - 0.4).abs() < 1e-15 && (g[1].data()[0] - 1.2).abs() < 1e-15);
        let mut bad = vec![Tensor::from_vec(vec![f64::NAN])];
        assert!(clip_global_norm(&mut bad, 1.0).is_nan());
        assert!(RunConfig::from_json(r#"{"grad_clip": -1}"#).is_err());
        assert_eq!(RunConfig::from_json(r#"{"grad_clip": 2.5}"#).unwrap().train.grad_clip, 2.5);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(&store, 0.01);
        adam.step(&mut store, &[Tensor::from_vec(vec![3.0, -0.2, 40.0])]).unwrap();
        let want = [0.99, -1.99, 0.49];
        for (a, b) in store.get(id).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_grad_decays_moments() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(vec![1.0]));
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(store.get(id).data(), &[1.0]);
        adam.step(&mut store, &[Tensor::from_vec(vec![1.0])]).unwrap();
        let m1 = adam.m[0][0];
        adam.step(&mut store, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert!((adam.m[0][0] - 0.9 * m1).abs() < 1e-15);
        let before = store.get(id).clone();
        assert!(adam.step(&mut store, &[Tensor::from_vec(vec![f64::NAN])]).is_err());
        assert_eq!(store.get(id), &before);
        assert_eq!(adam.t, 3);
    }

    #[test]
    fn adam_two_steps_on_square() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_vec(vec![1.0]));
        let mut adam = Adam::new(&store, 0.1);
        // hand-rolled reference
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut prev = 1.0;
        for t in 1..=2 {
            let g = 2.0 * store.get(id).data()[0];
            adam.step(&mut store, &[Tensor::from_vec(vec![g])]).unwrap();
            let gr = 2.0 * x;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            let now = store.get(id).data()[0];
            assert!((now - x).abs() < 1e-15);
            assert!(now < prev && now > 0.0);
            prev = now;
        }
    }

    #[test]
    fn monitor_improving_never_drops() {
        let mut m = Monitor::new(1e-6, 5, 15);
        for i in 0..50 {
            let a = m.observe(10.0 - i as f64 * 0.1);
            assert!(a.improved && !a.lr_drop && !a.stop);
        }
    }

    #[test]
    fn monitor_frozen_counts() {
        let mut m = Monitor::new(1e-6, 5, 15);
        let mut drops = Vec::new();
        let mut stop_at = None;
        for epoch in 1..=30 {
            let a = m.observe(1.0);
            assert_eq!(a.improved, epoch == 1);
            if a.lr_drop {
                drops.push(epoch);
            }
            if a.stop {
                stop_at = Some(epoch);
                break;
            }
        }
        assert_eq!(drops, vec![6, 11, 16]);
        assert_eq!(stop_at, Some(16));
        let mut m = Monitor::new(1e-6, 5, 15);
        m.observe(1.0);
        assert!(!m.observe(1.0 - 5e-7).improved);
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_json().to_string();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"lr": 0.01, "d_model": 8, "heads": 2}"#).unwrap();
        assert_eq!((partial.train.lr, partial.model.d_model), (0.01, 8));
        assert!(matches!(RunConfig::from_json(r#"{"learning_rate": 0.01}"#), Err(PipelineError::Config(_))));
        assert!(RunConfig::from_json(r#"{"lr": -1}"#).is_err());
        assert!(RunConfig::from_json("[1]").is_err());
        let keys = cfg.to_json().as_object().unwrap().len();
        assert_eq!(keys, keys_of(&ModelConfig::default()).len() + keys_of(&TrainConfig::default()).len());
    }

    #[test]
    fn windows_stay_in_partition() {
        let frame = synth_generate(&SynthSpec::benchmark(300, 1)).unwrap();
        let p = prepare(&frame, &ModelConfig::default(), &TrainConfig::default()).unwrap();
        assert_eq!(p.bounds, [0, 180, 240, 300]);
        assert_eq!(p.train.len(), 180 - 31 + 1);
        assert_eq!(p.val.len(), 60 - 31 + 1);
        assert_eq!(*p.test.starts.first().unwrap(), 240);
        let mut bad = p.clone();
        bad.val.starts[0] = 170;
        assert!(matches!(leakage_audit(&bad, 31), Err(PipelineError::Leakage(_))));
    }

    #[test]
    fn summary_means() {
        let mk = |r2: f64| Metrics {
            mae: r2 * 2.0,
            rmse: 1.0,
            mape_pct: 3.0,
            mape_excluded: 0,
            r2,
            n: 10,
        };
        let (mean, std) = summarize(&[mk(0.5), mk(0.7), mk(0.9)]);
        assert!((mean.r2 - 0.7).abs() < 1e-12 && (mean.mae - 1.4).abs() < 1e-12);
        assert_eq!(std.rmse, 0.0);
    }

    #[test]
    fn short_training_run_is_deterministic() {
        let frame = synth_generate(&SynthSpec::benchmark(200, 2)).unwrap();
        let model = ModelConfig {
            window: 12,
            d_model: 8,
            ffn_dim: 8,
            decomp_kernel: 5,
            state_dim: 4,
            cross_dim: 4,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            max_epochs: 3,
            batch_size: 32,
            seeds: vec![4],
            ..TrainConfig::default()
        };
        let cfg = RunConfig { model, train };
        let (a, ma) = run(&frame, &cfg).unwrap();
        let (b, _) = run(&frame, &cfg).unwrap();
        assert_eq!(a.per_seed, b.per_seed);
        assert_eq!(a.per_seed[0].epochs.len(), 3);
        assert!(a.per_seed[0].epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
        let rows = forecast_frame(&ma, &frame).unwrap();
        assert_eq!(rows.len(), 200 - 12 + 1);
        assert!(rows.last().unwrap().y_true.is_none());
        assert!(rows.iter().all(|r| r.std.unwrap() > 0.0));
        let mut one = Vec::new();
        let mut two = Vec::new();
        write_forecast_csv(&rows, 1, &mut one).unwrap();
        write_forecast_csv(&forecast_frame(&ma, &frame).unwrap(), 1, &mut two).unwrap();
        assert_eq!(one, two);
        assert!(String::from_utf8(one).unwrap().starts_with("timestamp,y_true,y_mean,y_std\n"));
        assert!(matches!(forecast_frame(&ma, &frame.slice(0, 11)), Err(PipelineError::FrameTooShort { .. })));
    }
}
