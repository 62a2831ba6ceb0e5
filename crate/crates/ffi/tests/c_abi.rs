use std::ffi::{CStr, CString};
use std::fs::File;
use std::ptr;

use maestro_core::model::Model;
use maestro_core::preprocess::{synth_generate, write_csv, SynthSpec};
use maestro_ffi::*;

const CONFIG: &str = r#"{
    "window": 16, "horizon": 2, "d_model": 4, "heads": 1, "ffn_dim": 8,
    "decomp_kernel": 5, "kernels": [3], "dilations": [1], "state_dim": 2, "cross_dim": 2,
    "max_epochs": 2, "seeds": [0], "batch_size": 64
}"#;

fn last_error() -> String {
    let p = maestro_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synth_csv(dir: &tempfile::TempDir) -> CString {
    let path = dir.path().join("data.csv");
    let frame = synth_generate(&SynthSpec::benchmark(160, 3)).unwrap();
    write_csv(&frame, File::create(&path).unwrap()).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn train(dir: &tempfile::TempDir) -> *mut MaestroModel {
    let csv = synth_csv(dir);
    let cfg = CString::new(CONFIG).unwrap();
    let target = CString::new("ili").unwrap();
    let channels = CString::new("search=trends,temperature=weather").unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { maestro_train_csv(cfg.as_ptr(), csv.as_ptr(), target.as_ptr(), channels.as_ptr(), &mut model) };
    assert_eq!(st, MaestroStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(maestro_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut out = ptr::null_mut();
    let st = unsafe { maestro_model_load(ptr::null(), &mut out) };
    assert_eq!(st, MaestroStatus::NullPointer);
    assert!(last_error().contains("path"));
    let st = unsafe { maestro_model_shape(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(st, MaestroStatus::NullPointer);
    unsafe { maestro_model_free(ptr::null_mut()) };
}

#[test]
fn missing_checkpoint_is_io_error() {
    let path = CString::new("/nonexistent/model.json").unwrap();
    let mut out = ptr::null_mut();
    let st = unsafe { maestro_model_load(path.as_ptr(), &mut out) };
    assert_eq!(st, MaestroStatus::Io);
    assert!(out.is_null());
}

#[test]
fn bad_channel_spec_is_invalid_argument() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(&dir);
    let target = CString::new("ili").unwrap();
    let channels = CString::new("search").unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { maestro_train_csv(ptr::null(), csv.as_ptr(), target.as_ptr(), channels.as_ptr(), &mut model) };
    assert_eq!(st, MaestroStatus::InvalidArgument);
    assert!(last_error().contains("name=modality"));
}

#[test]
fn missing_column_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(&dir);
    let target = CString::new("cases").unwrap();
    let channels = CString::new("").unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { maestro_train_csv(ptr::null(), csv.as_ptr(), target.as_ptr(), channels.as_ptr(), &mut model) };
    assert_eq!(st, MaestroStatus::Data);
    assert!(last_error().contains("cases"));
}

#[test]
fn train_forecast_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = train(&dir);
    let (mut l, mut h, mut d, mut n) = (0, 0, 0, 0);
    assert_eq!(unsafe { maestro_model_shape(model, &mut l, &mut h, &mut d, &mut n) }, MaestroStatus::Ok);
    assert_eq!((l, h, d), (16, 2, 3));
    assert!(n > 0);

    let batch = 3;
    let inputs: Vec<f64> = (0..batch * l * d).map(|i| 5.0 + (i as f64 * 0.37).sin()).collect();
    let mut mean = vec![0.0; batch * h];
    let mut std = vec![0.0; batch * h];
    let st = unsafe {
        maestro_model_forecast(model, inputs.as_ptr(), inputs.len(), batch, mean.as_mut_ptr(), std.as_mut_ptr(), mean.len())
    };
    assert_eq!(st, MaestroStatus::Ok, "{}", last_error());
    assert!(mean.iter().all(|v| v.is_finite()));
    assert!(std.iter().all(|&s| s > 0.0));

    let path = dir.path().join("model.json");
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { maestro_model_save(model, cpath.as_ptr()) }, MaestroStatus::Ok);

    // the saved checkpoint agrees with the core library
    let core = Model::load(&path).unwrap();
    let x = maestro_core::diffcore::Tensor::new(vec![batch, l, d], inputs.clone()).unwrap();
    let expect: Vec<f64> = core.forecast_raw(&x).unwrap().iter().flat_map(|r| r.mean.clone()).collect();
    assert_eq!(expect, mean);

    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { maestro_model_load(cpath.as_ptr(), &mut loaded) }, MaestroStatus::Ok);
    let mut mean2 = vec![0.0; batch * h];
    let st = unsafe {
        maestro_model_forecast(loaded, inputs.as_ptr(), inputs.len(), batch, mean2.as_mut_ptr(), ptr::null_mut(), mean2.len())
    };
    assert_eq!(st, MaestroStatus::Ok);
    assert_eq!(mean, mean2);

    let st = unsafe {
        maestro_model_forecast(model, inputs.as_ptr(), inputs.len() - 1, batch, mean.as_mut_ptr(), ptr::null_mut(), mean.len())
    };
    assert_eq!(st, MaestroStatus::InvalidArgument);
    assert!(last_error().contains("inputs_len"));

    unsafe {
        maestro_model_free(model);
        maestro_model_free(loaded);
    }
}

#[test]
fn gradcheck_passes_through_the_abi() {
    let mut worst = f64::NAN;
    assert_eq!(unsafe { maestro_gradcheck(1, 7, &mut worst) }, MaestroStatus::Ok, "{}", last_error());
    assert!(worst < 1e-4);
    assert_eq!(unsafe { maestro_gradcheck(0, 7, ptr::null_mut()) }, MaestroStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/maestro.h")).unwrap();
    for name in [
        "maestro_last_error",
        "maestro_version",
        "maestro_model_load",
        "maestro_model_save",
        "maestro_train_csv",
        "maestro_model_free",
        "maestro_model_shape",
        "maestro_model_forecast",
        "maestro_gradcheck",
        "typedef struct MaestroModel MaestroModel",
        "MAESTRO_STATUS_PANIC = 6",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", concat!(env!("CARGO_MANIFEST_DIR"), "/include/maestro.h")])
        .status()
    else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(status.success());
}
