use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pareidolia_core::backbone::fixtures;
use pareidolia_core::head::{self, LinearHead};
use pareidolia_ffi::*;

fn last_error() -> String {
    let p = pp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_model(dir: &Path) -> PathBuf {
    let path = dir.join("identity.onnx");
    std::fs::write(&path, fixtures::identity_backbone().encode()).unwrap();
    path
}

#[test]
fn backbone_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(write_model(dir.path()).to_str().unwrap()).unwrap();
    let mut bb = ptr::null_mut();
    unsafe {
        assert_eq!(pp_backbone_load(path.as_ptr(), &mut bb), PpStatus::Ok);
        let mut d = 0;
        assert_eq!(pp_backbone_feature_dim(bb, &mut d), PpStatus::Ok);
        assert_eq!(d, 12);
        let pixels = vec![0.25f32; 2 * pp_image_len()];
        let mut out = vec![0f32; 2 * d];
        assert_eq!(pp_backbone_extract(bb, pixels.as_ptr(), 2, out.as_mut_ptr()), PpStatus::Ok);
        assert!(out.iter().all(|&v| v == 0.25));
        assert_eq!(pp_backbone_extract(bb, pixels.as_ptr(), 0, out.as_mut_ptr()), PpStatus::InvalidArgument);
        pp_backbone_free(bb);
        pp_backbone_free(ptr::null_mut());
    }
}

#[test]
fn malformed_model_and_null_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.onnx");
    std::fs::write(&bad, b"not a model").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    let mut bb = ptr::null_mut();
    unsafe {
        assert_eq!(pp_backbone_load(bad.as_ptr(), &mut bb), PpStatus::Malformed);
        assert!(!last_error().is_empty());
        assert_eq!(pp_backbone_load(ptr::null(), &mut bb), PpStatus::NullPointer);
        assert_eq!(pp_backbone_feature_dim(ptr::null(), &mut 0), PpStatus::NullPointer);
    }
    assert!(bb.is_null());
}

#[test]
fn head_checkpoint_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let w: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
    let h = LinearHead::from_parts(3, w, [0.05, -0.05]).unwrap();
    let path = dir.path().join("head.pphd");
    head::write_checkpoint(&path, &h, &serde_json::json!({})).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let x = [0.3f32, -1.0, 2.0];
    let mut handle = ptr::null_mut();
    let mut p = [0.0; 2];
    unsafe {
        assert_eq!(pp_head_load(cpath.as_ptr(), &mut handle), PpStatus::Ok);
        assert_eq!(pp_head_predict_proba(handle, x.as_ptr(), 3, p.as_mut_ptr()), PpStatus::Ok);
        pp_head_free(handle);
    }
    assert_eq!(p, h.forward(&x).unwrap());
}

#[test]
fn statistics_match_core() {
    let a = [0.2, 0.9, 1.4, 2.2, 0.1];
    let b = [1.0, 1.5, 0.3, 2.8, 2.0, 1.1];
    let mut r = PpStatResult::default();
    unsafe {
        assert_eq!(pp_welch_t(a.as_ptr(), a.len(), b.as_ptr(), b.len(), &mut r), PpStatus::Ok);
    }
    let core = pareidolia_core::stats::t_test(pareidolia_core::stats::TestKind::Welch, &a, Some(&b)).unwrap();
    let core = core.result().unwrap();
    assert_eq!((r.t, r.df, r.p, r.d), (core.t, core.df, core.p_raw, core.d));

    // constant nonzero differences: t is infinite
    let (up, down) = ([2.0; 4], [1.0; 4]);
    unsafe {
        assert_eq!(pp_paired_t(up.as_ptr(), down.as_ptr(), 4, &mut r), PpStatus::Undefined);
        assert!(last_error().contains("zero variance"));
        let mut rho = 0.0;
        assert_eq!(pp_pearson_r(a.as_ptr(), [1.0, 2.0, 3.0, 4.0, 5.0].as_ptr(), 5, &mut rho), PpStatus::Ok);
        assert!(rho > 0.0 && rho < 1.0);
    }
}

#[test]
fn flat_sigmoid_is_flagged() {
    let x = [0.1, 0.3, 0.5, 0.7];
    let y = [0.4; 4];
    let mut fit = PpSigmoidFit::default();
    unsafe {
        assert_eq!(pp_fit_sigmoid(x.as_ptr(), y.as_ptr(), 4, &mut fit), PpStatus::Ok);
    }
    assert_eq!(fit.flat, 1);
    assert_eq!(fit.flat_value, 0.4);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pareidolia.h")).unwrap();
    for f in [
        "pp_last_error_message",
        "pp_image_len",
        "pp_backbone_load",
        "pp_backbone_feature_dim",
        "pp_backbone_model_hash",
        "pp_backbone_extract",
        "pp_backbone_free",
        "pp_head_load",
        "pp_head_new",
        "pp_head_dim",
        "pp_head_predict_proba",
        "pp_head_free",
        "pp_pearson_r",
        "pp_welch_t",
        "pp_paired_t",
        "pp_one_sample_t",
        "pp_sigmoid",
        "pp_fit_sigmoid",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}

/// Compiles tests/c/smoke.c against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libpareidolia_ffi.a");
    assert!(lib.is_file(), "static library not built at {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let model = write_model(tmp.path());
    let out = Command::new(&exe).arg(&model).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
