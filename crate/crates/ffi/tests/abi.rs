use std::ffi::{CStr, CString};
use std::ptr;

use damsdan::mda::{mmd_squared_with, FusionWeights, MmdEstimator};
use damsdan::model::{ArchConfig, Damsdan, EncoderConfig};
use damsdan::numerics::{Rng, Tensor};
use damsdan_ffi::*;

fn last_error() -> String {
    let len = damsdan_last_error_length();
    let mut buf = vec![0 as std::ffi::c_char; len];
    assert_eq!(unsafe { damsdan_last_error_message(buf.as_mut_ptr(), len) }, DamsdanStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &std::path::Path) -> (Damsdan, CString) {
    let cfg = EncoderConfig::new(6, 3, 2, ArchConfig::default());
    let model = Damsdan::new(cfg, &mut Rng::new(3)).unwrap();
    let path = dir.join("model.json");
    model.save(&path).unwrap();
    (model, CString::new(path.to_str().unwrap()).unwrap())
}

#[test]
fn load_predict_free_matches_rust() {
    let dir = tempfile::tempdir().unwrap();
    let (model, path) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { damsdan_model_load(path.as_ptr(), &mut handle) }, DamsdanStatus::Ok);
    assert!(!handle.is_null());
    unsafe {
        assert_eq!(damsdan_model_input_dim(handle), 6);
        assert_eq!(damsdan_model_num_classes(handle), 3);
        assert_eq!(damsdan_model_num_sources(handle), 2);
    }

    let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).cos()).collect();
    let mut probs = vec![0.0; 12];
    let status = unsafe { damsdan_model_predict(handle, x.as_ptr(), 4, 6, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(status, DamsdanStatus::Ok);
    let expect = model.predict(&Tensor::from_vec(4, 6, x.clone()).unwrap()).unwrap();
    assert_eq!(probs, expect.data());

    let mut small = vec![0.0; 11];
    let status = unsafe { damsdan_model_predict(handle, x.as_ptr(), 4, 6, small.as_mut_ptr(), small.len()) };
    assert_eq!(status, DamsdanStatus::BufferTooSmall);

    let status = unsafe { damsdan_model_predict(handle, x.as_ptr(), 3, 8, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(status, DamsdanStatus::Numeric);
    assert!(!last_error().is_empty());
    unsafe { damsdan_model_free(handle) };
    unsafe { damsdan_model_free(ptr::null_mut()) };
}

#[test]
fn load_failures_report_kind_and_message() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(unsafe { damsdan_model_load(missing.as_ptr(), &mut handle) }, DamsdanStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format\": 1}").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { damsdan_model_load(bad.as_ptr(), &mut handle) }, DamsdanStatus::Config);

    assert_eq!(unsafe { damsdan_model_load(ptr::null(), &mut handle) }, DamsdanStatus::NullPointer);
}

#[test]
fn mmd_matches_library() {
    let a: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
    let b: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).cos() + 0.5).collect();
    let ta = Tensor::from_vec(5, 3, a.clone()).unwrap();
    let tb = Tensor::from_vec(3, 3, b.clone()).unwrap();
    for (unbiased, est) in [(false, MmdEstimator::Biased), (true, MmdEstimator::Unbiased)] {
        let mut out = f64::NAN;
        let s = unsafe { damsdan_mmd_squared(a.as_ptr(), 5, b.as_ptr(), 3, 3, 0.8, unbiased, &mut out) };
        assert_eq!(s, DamsdanStatus::Ok);
        assert_eq!(out, mmd_squared_with(&ta, &tb, 0.8, est).unwrap());
    }
    let mut out = 0.0;
    let s = unsafe { damsdan_mmd_squared(a.as_ptr(), 5, b.as_ptr(), 3, 3, -1.0, false, &mut out) };
    assert_ne!(s, DamsdanStatus::Ok);
}

#[test]
fn fusion_weights_sum_to_one_and_favor_close_sources() {
    let raw = [0.1, 0.4, 0.9];
    let mut out = [0.0; 3];
    let s = unsafe { damsdan_fusion_weights(raw.as_ptr(), 3, 0.5, out.as_mut_ptr()) };
    assert_eq!(s, DamsdanStatus::Ok);
    let expect = FusionWeights::from_raw_mmd(raw.to_vec(), 0.5, 0).unwrap();
    assert_eq!(out.to_vec(), expect.final_weights);
    assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(out[0] > out[1] && out[1] > out[2]);

    let s = unsafe { damsdan_fusion_weights(raw.as_ptr(), 0, 0.5, out.as_mut_ptr()) };
    assert_eq!(s, DamsdanStatus::Data);
    let s = unsafe { damsdan_fusion_weights(raw.as_ptr(), 3, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, DamsdanStatus::Config);
}

#[test]
fn error_buffer_too_small_and_version() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.json").unwrap();
    unsafe { damsdan_model_load(missing.as_ptr(), &mut handle) };
    let mut tiny = [0 as std::ffi::c_char; 2];
    assert_eq!(unsafe { damsdan_last_error_message(tiny.as_mut_ptr(), 2) }, DamsdanStatus::BufferTooSmall);
    let v = unsafe { CStr::from_ptr(damsdan_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/damsdan.h")).unwrap();
    for name in [
        "damsdan_model_load",
        "damsdan_model_free",
        "damsdan_model_predict",
        "damsdan_model_input_dim",
        "damsdan_mmd_squared",
        "damsdan_fusion_weights",
        "damsdan_last_error_message",
        "damsdan_last_error_length",
        "damsdan_version",
        "typedef struct DamsdanModel DamsdanModel",
        "DAMSDAN_STATUS_OK = 0",
        "DAMSDAN_STATUS_IO = 5",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"damsdan.h\"\n\
         int probe(void) {\n\
           DamsdanModel *m = 0;\n\
           DamsdanStatus s = damsdan_model_load(\"x\", &m);\n\
           damsdan_model_free(m);\n\
           return s == DAMSDAN_STATUS_OK ? 0 : (int)damsdan_last_error_length();\n\
         }\n",
    )
    .unwrap();
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let status = std::process::Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I", include])
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(_) => eprintln!("{compiler} not found; skipping"),
        }
    }
}
