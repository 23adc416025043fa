use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use delta_core::adapt::{Adapter, MethodSpec};
use delta_core::netcore::{forward, Checkpoint, ModelSpec, ModelState, OptimizerConfig};
use delta_core::normalize::NormMode;
use delta_core::FeatureMatrix;
use delta_ffi::*;

fn model() -> ModelState {
    ModelState::init(&ModelSpec { input_dim: 4, hidden: vec![8, 6], classes: 3, seed: 11 }).unwrap()
}

fn batch(offset: f64) -> Vec<f64> {
    (0..40).map(|i| ((i as f64) * 0.37 + offset).sin() * 2.0).collect()
}

fn load(m: &ModelState) -> *mut DeltaModel {
    let json = CString::new(Checkpoint::new(m.clone(), None).to_json().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { delta_model_from_json(json.as_ptr(), &mut handle) }, DeltaStatus::Ok);
    assert!(!handle.is_null());
    handle
}

fn last_error() -> String {
    let p = delta_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(delta_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_handle_reports_shape_and_source_predictions() {
    let m = model();
    let h = load(&m);
    unsafe {
        assert_eq!(delta_model_input_dim(h), 4);
        assert_eq!(delta_model_classes(h), 3);
        let x = batch(0.0);
        let mut probs = vec![0.0; 30];
        let status = delta_model_predict(h, x.as_ptr(), 10, 4, probs.as_mut_ptr(), probs.len());
        assert_eq!(status, DeltaStatus::Ok);
        let want = forward(&m, &FeatureMatrix::from_vec(10, 4, x).unwrap(), NormMode::SourceEma).unwrap();
        assert_eq!(probs, want.probs.as_slice());
        delta_model_free(h);
    }
}

#[test]
fn adapter_matches_library_adapter_bitwise() {
    let m = model();
    let h = load(&m);
    let method = CString::new("tent+delta").unwrap();
    let mut opts = delta_adapter_options_default();
    opts.lr = 0.05;
    let mut a = ptr::null_mut();
    unsafe {
        assert_eq!(delta_adapter_new(h, method.as_ptr(), &opts, &mut a), DeltaStatus::Ok);
        // the adapter owns a copy; the model handle may go away
        delta_model_free(h);
    }
    let spec = MethodSpec::preset("tent+delta").unwrap().with_optimizer(OptimizerConfig::adam(0.05));
    let mut reference = Adapter::new(&m, spec).unwrap();
    for t in 0..4 {
        let x = batch(t as f64);
        let mut probs = vec![0.0; 30];
        let status = unsafe { delta_adapter_step(a, x.as_ptr(), 10, 4, probs.as_mut_ptr(), probs.len()) };
        assert_eq!(status, DeltaStatus::Ok);
        let want = reference.step(&FeatureMatrix::from_vec(10, 4, x).unwrap()).unwrap();
        assert_eq!(probs, want.predictions.as_slice());
    }
    assert_eq!(unsafe { delta_adapter_updates(a) }, reference.state.updates);
    assert!(reference.state.updates > 0);

    let x = batch(9.0);
    let mut p1 = vec![0.0; 30];
    let mut p2 = vec![0.0; 30];
    unsafe {
        assert_eq!(delta_adapter_predict(a, x.as_ptr(), 10, 4, p1.as_mut_ptr(), 30), DeltaStatus::Ok);
        assert_eq!(delta_adapter_predict(a, x.as_ptr(), 10, 4, p2.as_mut_ptr(), 30), DeltaStatus::Ok);
        delta_adapter_free(a);
    }
    assert_eq!(p1, p2);
}

#[test]
fn error_codes_and_messages() {
    let m = model();
    let h = load(&m);
    let mut a = ptr::null_mut();
    unsafe {
        let bogus = CString::new("tent+bogus").unwrap();
        assert_eq!(delta_adapter_new(h, bogus.as_ptr(), ptr::null(), &mut a), DeltaStatus::Parse);
        assert!(last_error().contains("bogus"));
        assert!(a.is_null());

        let bad_alpha = DeltaAdapterOptions { alpha: 1.5, ..delta_adapter_options_default() };
        let tent = CString::new("tent").unwrap();
        assert_eq!(delta_adapter_new(h, tent.as_ptr(), &bad_alpha, &mut a), DeltaStatus::Config);

        assert_eq!(delta_adapter_new(ptr::null(), tent.as_ptr(), ptr::null(), &mut a), DeltaStatus::NullPointer);
        assert_eq!(delta_adapter_new(h, ptr::null(), ptr::null(), &mut a), DeltaStatus::NullPointer);

        assert_eq!(delta_adapter_new(h, tent.as_ptr(), ptr::null(), &mut a), DeltaStatus::Ok);
        assert!(delta_last_error_message().is_null());

        // a short output buffer is rejected before any state changes
        let x = batch(0.0);
        let mut small = vec![0.0; 29];
        assert_eq!(delta_adapter_step(a, x.as_ptr(), 10, 4, small.as_mut_ptr(), 29), DeltaStatus::BufferTooSmall);
        assert_eq!(delta_adapter_updates(a), 0);

        let mut probs = vec![0.0; 30];
        assert_eq!(delta_adapter_step(a, x.as_ptr(), 10, 3, probs.as_mut_ptr(), 30), DeltaStatus::Config);
        assert_eq!(delta_adapter_step(a, ptr::null(), 10, 4, probs.as_mut_ptr(), 30), DeltaStatus::NullPointer);

        let nan = vec![f64::NAN; 40];
        assert_eq!(delta_adapter_step(a, nan.as_ptr(), 10, 4, probs.as_mut_ptr(), 30), DeltaStatus::Numeric);

        let junk = CString::new("{\"schema\":\"other\"}").unwrap();
        let mut h2 = ptr::null_mut();
        assert_eq!(delta_model_from_json(junk.as_ptr(), &mut h2), DeltaStatus::Parse);
        let missing = CString::new("/nonexistent/model.json").unwrap();
        assert_eq!(delta_model_load(missing.as_ptr(), &mut h2), DeltaStatus::Io);
        assert!(h2.is_null());

        assert_eq!(delta_model_input_dim(ptr::null()), 0);
        delta_model_free(ptr::null_mut());
        delta_adapter_free(ptr::null_mut());
        delta_adapter_free(a);
        delta_model_free(h);
    }
}

#[test]
fn load_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    delta_core::netcore::save_checkpoint(&path, &Checkpoint::new(model(), None)).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(delta_model_load(c.as_ptr(), &mut h), DeltaStatus::Ok);
        assert_eq!(delta_model_classes(h), 3);
        delta_model_free(h);
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/delta.h");
    let header = std::fs::read_to_string(&header_path).unwrap();
    for name in [
        "delta_version",
        "delta_last_error_message",
        "delta_model_load",
        "delta_model_from_json",
        "delta_model_free",
        "delta_model_input_dim",
        "delta_model_classes",
        "delta_model_predict",
        "delta_adapter_options_default",
        "delta_adapter_new",
        "delta_adapter_free",
        "delta_adapter_step",
        "delta_adapter_predict",
        "delta_adapter_updates",
        "DELTA_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(header.contains(name), "{name} missing from delta.h");
    }

    let Ok(status) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping header compile check");
        return;
    };
    assert!(status.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use_header.c");
    std::fs::write(
        &src,
        "#include \"delta.h\"\n\
         int main(void) {\n\
           DeltaModel *m = 0; DeltaAdapter *a = 0;\n\
           DeltaAdapterOptions o = delta_adapter_options_default();\n\
           DeltaStatus s = delta_adapter_new(m, \"tent\", &o, &a);\n\
           return s == DELTA_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header_path.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
