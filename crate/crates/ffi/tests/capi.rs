use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use convzoo_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(cz_last_error()) }.to_string_lossy().into_owned()
}

fn new_model(kind: &str, classes: usize, width: f64, res: usize, seed: u64) -> *mut CzModel {
    let kind = CString::new(kind).unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { cz_model_new(kind.as_ptr(), classes, width, res, seed, &mut m) };
    assert_eq!(st, CzStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

#[test]
fn mini_yolo_counts_match_audit() {
    let m = new_model("mini_yolo", 2, 1.0, 0, 0);
    let (mut t, mut f, mut b) = (0, 0, 0);
    assert_eq!(unsafe { cz_model_param_counts(m, &mut t, &mut f, &mut b) }, CzStatus::Ok);
    assert_eq!((t, f, b), (98_214, 0, 0));
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { cz_model_audit_json(m, &mut json) }, CzStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { cz_string_free(json) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["totals"]["params_trainable"], 98_214);
    unsafe { cz_model_free(m) };
}

#[test]
fn unknown_model_reports_config_error() {
    let kind = CString::new("resnet9000").unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { cz_model_new(kind.as_ptr(), 2, 1.0, 0, 0, &mut m) };
    assert_eq!(st, CzStatus::Config);
    assert!(m.is_null());
    assert!(last_error().contains("unknown model"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cz_model_new(ptr::null(), 2, 1.0, 0, 0, &mut m) }, CzStatus::NullArgument);
    let mut n = 0;
    assert_eq!(unsafe { cz_model_output_len(ptr::null(), &mut n) }, CzStatus::NullArgument);
    unsafe { cz_model_free(ptr::null_mut()) };
    unsafe { cz_string_free(ptr::null_mut()) };
}

#[test]
fn predict_returns_probabilities() {
    let m = new_model("evolved_baseline", 3, 0.0625, 16, 1);
    let (mut c, mut h, mut w, mut len) = (0, 0, 0, 0);
    unsafe {
        assert_eq!(cz_model_input_shape(m, &mut c, &mut h, &mut w), CzStatus::Ok);
        assert_eq!(cz_model_output_len(m, &mut len), CzStatus::Ok);
    }
    assert_eq!((c, h, w, len), (3, 16, 16, 3));
    let input: Vec<f32> = (0..2 * c * h * w).map(|i| (i % 7) as f32 / 7.0).collect();
    let mut out = vec![0f32; 2 * len];
    assert_eq!(unsafe { cz_model_predict(m, input.as_ptr(), 2, out.as_mut_ptr(), out.len()) }, CzStatus::Ok);
    for row in out.chunks(len) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    let st = unsafe { cz_model_predict(m, input.as_ptr(), 2, out.as_mut_ptr(), 5) };
    assert_eq!(st, CzStatus::BufferTooSmall);
    unsafe { cz_model_free(m) };
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.cnt").to_str().unwrap()).unwrap();
    let a = new_model("variant_a", 2, 0.0625, 16, 1);
    let b = new_model("variant_a", 2, 0.0625, 16, 2);
    let mut matched = 0;
    let prefix = CString::new("stage1.").unwrap();
    unsafe {
        assert_eq!(cz_model_set_trainable(a, prefix.as_ptr(), false, &mut matched), CzStatus::Ok);
        assert!(matched > 0);
        assert_eq!(cz_model_save(a, path.as_ptr()), CzStatus::Ok);
        assert_eq!(cz_model_load(b, path.as_ptr()), CzStatus::Ok);
    }
    let counts = |m| {
        let (mut t, mut f, mut bf) = (0, 0, 0);
        unsafe { cz_model_param_counts(m, &mut t, &mut f, &mut bf) };
        (t, f, bf)
    };
    assert_eq!(counts(a), counts(b));
    assert!(counts(b).1 > 0);

    let other = new_model("variant_b", 2, 0.0625, 16, 1);
    assert_eq!(unsafe { cz_model_load(other, path.as_ptr()) }, CzStatus::Data);
    assert!(last_error().contains("checkpoint mismatch"), "{}", last_error());
    let missing = CString::new(dir.path().join("none.cnt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cz_model_load(other, missing.as_ptr()) }, CzStatus::Io);
    unsafe {
        cz_model_free(a);
        cz_model_free(b);
        cz_model_free(other);
    }
}

#[test]
fn freeze_backbone_leaves_head_trainable() {
    let m = new_model("transfer_head", 15, 1.0, 0, 0);
    let (mut t, mut f, mut b) = (0, 0, 0);
    unsafe {
        assert_eq!(cz_model_freeze_backbone(m), CzStatus::Ok);
        cz_model_param_counts(m, &mut t, &mut f, &mut b);
    }
    assert_eq!((t, f), (19_215, 0));
    unsafe { cz_model_free(m) };
}

#[test]
fn iou_of_half_overlap() {
    let a = [0.0f32, 0.0, 1.0, 1.0];
    let b = [0.5f32, 0.0, 1.5, 1.0];
    let mut v = 0.0;
    assert_eq!(unsafe { cz_iou(a.as_ptr(), b.as_ptr(), &mut v) }, CzStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-9);
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("convzoo.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "cz_last_error",
        "cz_version",
        "cz_model_new",
        "cz_model_free",
        "cz_model_input_shape",
        "cz_model_output_len",
        "cz_model_param_counts",
        "cz_model_audit_json",
        "cz_model_set_trainable",
        "cz_model_freeze_backbone",
        "cz_model_save",
        "cz_model_load",
        "cz_model_predict",
        "cz_iou",
        "cz_string_free",
        "typedef struct CzModel CzModel",
        "CZ_STATUS_OK = 0",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "convzoo.h"
int main(void) {
    CzModel *m = NULL;
    if (cz_model_new("mini_yolo", 2, 1.0, 0, 0, &m) != CZ_STATUS_OK) return 1;
    uint64_t t = 0, f = 0, b = 0;
    if (cz_model_param_counts(m, &t, &f, &b) != CZ_STATUS_OK) return 2;
    cz_model_free(m);
    if (cz_model_new("nope", 2, 1.0, 0, 0, &m) != CZ_STATUS_CONFIG) return 3;
    printf("%llu %s\n", (unsigned long long)t, cz_last_error());
    return 0;
}
"#;

/// Compiles a C program against the generated header and the static
/// library built alongside this test.
#[test]
fn c_program_links_against_static_library() {
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().parent().unwrap().join("libconvzoo_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler named `cc` is required");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("98214 configuration error: unknown model"), "{stdout}");
}
