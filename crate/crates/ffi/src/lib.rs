//! C ABI over the forecasting engine.
//!
//! Models cross the boundary as opaque `MaestroModel` handles owned by the
//! caller and released with `maestro_model_free`. Every fallible call returns
//! a `MaestroStatus`; the message of the most recent failure on the calling
//! thread is available from `maestro_last_error`. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use maestro_core::diffcore::Tensor;
use maestro_core::gradsuite::run_suite;
use maestro_core::model::{Model, ModelError};
use maestro_core::pipeline::{run, PipelineError, RunConfig};
use maestro_core::preprocess::{ingest_csv, CsvSchema, MissingPolicy, Modality};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaestroStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numeric = 5,
    Panic = 6,
}

/// Opaque trained model.
pub struct MaestroModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

struct Failure(MaestroStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Io(_) => MaestroStatus::Io,
            _ => match e.exit_code() {
                2 => MaestroStatus::Data,
                3 => MaestroStatus::Numeric,
                _ => MaestroStatus::InvalidArgument,
            },
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => Failure(MaestroStatus::Io, e.to_string()),
            other => PipelineError::from(other).into(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MaestroStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MaestroStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MaestroStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MaestroStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MaestroStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{name}` is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const MaestroModel) -> Result<&'a Model, Failure> {
    p.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| Failure(MaestroStatus::NullPointer, "model handle is null".into()))
}

fn null_out(name: &str) -> Failure {
    Failure(MaestroStatus::NullPointer, format!("`{name}` is null"))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn maestro_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn maestro_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a JSON checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn maestro_model_load(path: *const c_char, out: *mut *mut MaestroModel) -> MaestroStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null_out("out"));
        }
        let inner = Model::load(path)?;
        *out = Box::into_raw(Box::new(MaestroModel { inner }));
        Ok(())
    })
}

/// Writes a JSON checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn maestro_model_save(model: *const MaestroModel, path: *const c_char) -> MaestroStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = str_arg(path, "path")?;
        m.save(path)?;
        Ok(())
    })
}

/// Trains on a CSV file and returns the best model.
///
/// `config_json` may be null for defaults. `channels` lists the exogenous
/// columns as `name=modality` pairs separated by commas, and may be empty.
///
/// # Safety
/// String arguments must be NUL-terminated (or null where allowed); `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn maestro_train_csv(
    config_json: *const c_char,
    csv_path: *const c_char,
    target: *const c_char,
    channels: *const c_char,
    out: *mut *mut MaestroModel,
) -> MaestroStatus {
    guard(|| {
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(str_arg(config_json, "config_json")?)?
        };
        let csv_path = str_arg(csv_path, "csv_path")?;
        let target = str_arg(target, "target")?;
        let channels = str_arg(channels, "channels")?;
        if out.is_null() {
            return Err(null_out("out"));
        }
        let mut columns = vec![(target.to_string(), Modality::Surveillance)];
        for spec in channels.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, m) = spec
                .split_once('=')
                .ok_or_else(|| invalid(format!("channel `{spec}` is not `name=modality`")))?;
            let m = Modality::parse(m).ok_or_else(|| invalid(format!("unknown modality `{m}`")))?;
            columns.push((name.to_string(), m));
        }
        let schema = CsvSchema {
            columns,
            target: target.to_string(),
            missing: MissingPolicy::ForwardFill,
        };
        let frame = ingest_csv(csv_path, &schema).map_err(PipelineError::from)?;
        let (_, inner) = run(&frame, &cfg)?;
        *out = Box::into_raw(Box::new(MaestroModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn maestro_model_free(model: *mut MaestroModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Look-back window `L`, forecast horizon `H`, input width `D` and the
/// trainable parameter count.
///
/// # Safety
/// `model` must come from this library; each non-null output must be writable.
#[no_mangle]
pub unsafe extern "C" fn maestro_model_shape(
    model: *const MaestroModel,
    window: *mut usize,
    horizon: *mut usize,
    inputs: *mut usize,
    params: *mut usize,
) -> MaestroStatus {
    guard(|| {
        let m = model_arg(model)?;
        let vals = [
            (window, m.config.window),
            (horizon, m.config.horizon),
            (inputs, m.layout.width()),
            (params, m.count_params()),
        ];
        for (p, v) in vals {
            if let Some(slot) = p.as_mut() {
                *slot = v;
            }
        }
        Ok(())
    })
}

/// Forecasts `batch` windows given row-major inputs `(batch, L, D)` in data
/// units and channel layout order. Writes `batch * H` means, and the same
/// number of standard deviations when `std_out` is non-null (the model must
/// estimate uncertainty in that case).
///
/// # Safety
/// `inputs` must hold `inputs_len` doubles; `mean_out` (and `std_out` when
/// non-null) must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn maestro_model_forecast(
    model: *const MaestroModel,
    inputs: *const f64,
    inputs_len: usize,
    batch: usize,
    mean_out: *mut f64,
    std_out: *mut f64,
    out_len: usize,
) -> MaestroStatus {
    guard(|| {
        let m = model_arg(model)?;
        if inputs.is_null() {
            return Err(null_out("inputs"));
        }
        if mean_out.is_null() {
            return Err(null_out("mean_out"));
        }
        let (l, h, d) = (m.config.window, m.config.horizon, m.layout.width());
        if batch == 0 || inputs_len != batch * l * d {
            return Err(invalid(format!(
                "inputs_len {inputs_len} does not match batch {batch} x window {l} x width {d}"
            )));
        }
        if out_len != batch * h {
            return Err(invalid(format!("out_len {out_len} does not match batch {batch} x horizon {h}")));
        }
        if !std_out.is_null() && !m.config.estimate_uncertainty {
            return Err(invalid("model was built without an uncertainty head"));
        }
        let data = std::slice::from_raw_parts(inputs, inputs_len).to_vec();
        let x = Tensor::new(vec![batch, l, d], data).map_err(|e| invalid(e.to_string()))?;
        let results = m.forecast_raw(&x)?;
        let means = std::slice::from_raw_parts_mut(mean_out, out_len);
        for (slot, v) in means.iter_mut().zip(results.iter().flat_map(|r| r.mean.iter())) {
            *slot = *v;
        }
        if !std_out.is_null() {
            let stds = std::slice::from_raw_parts_mut(std_out, out_len);
            for (slot, v) in stds.iter_mut().zip(results.iter().flat_map(|r| r.std.iter())) {
                *slot = *v;
            }
        }
        Ok(())
    })
}

/// Runs the finite-difference gradient suite over every module and writes
/// the largest relative error seen. Returns `Numeric` if any module fails.
///
/// # Safety
/// `max_rel_error` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn maestro_gradcheck(trials: usize, seed: u64, max_rel_error: *mut f64) -> MaestroStatus {
    guard(|| {
        if trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        let reports = run_suite(trials, seed).map_err(|e| Failure(MaestroStatus::Numeric, e.to_string()))?;
        let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        if let Some(slot) = max_rel_error.as_mut() {
            *slot = worst;
        }
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.module.as_str()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Failure(MaestroStatus::Numeric, format!("gradient check failed for {}", failed.join(", "))))
        }
    })
}
