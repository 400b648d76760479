//! C ABI over `pareidolia-core`.
//!
//! Every function returns a [`PpStatus`]; on failure a message is available
//! from [`pp_last_error_message`] on the same thread. Handles are opaque and
//! must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pareidolia_core::backbone::BackboneModel;
use pareidolia_core::dataset::{Orientation, PixelTensor, TENSOR_LEN};
use pareidolia_core::head::{self, LinearHead};
use pareidolia_core::psychometrics::{self, SigmoidFit};
use pareidolia_core::stats::{self, TestKind, TestOutcome};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    Numerical = 5,
    /// The statistic is undefined for this input (e.g. zero variance).
    Undefined = 6,
    BufferTooSmall = 7,
    Panic = 99,
}

/// Loaded frozen backbone.
pub struct PpBackbone(BackboneModel);

/// Trained two-class linear head.
pub struct PpHead(LinearHead);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PpStatResult {
    pub t: f64,
    pub df: f64,
    /// Two-tailed p.
    pub p: f64,
    pub d: f64,
    pub mean_difference: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PpSigmoidFit {
    /// 1 when the data were flat and no sigmoid was fitted; `a` and `b` are
    /// then NaN and `flat_value` holds the constant.
    pub flat: i32,
    pub a: f64,
    pub b: f64,
    pub rss: f64,
    pub flat_value: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: PpStatus, msg: impl Into<String>) -> PpStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> PpStatus) -> PpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(PpStatus::Panic, "internal panic"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, PpStatus> {
    if p.is_null() {
        return Err(fail(PpStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| fail(PpStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], PpStatus> {
    if p.is_null() {
        return Err(fail(PpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(PpStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Number of floats in one preprocessed image (3 × 224 × 224).
#[no_mangle]
pub extern "C" fn pp_image_len() -> usize {
    TENSOR_LEN
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_backbone_load(path: *const c_char, out: *mut *mut PpBackbone) -> PpStatus {
    guard(|| {
        non_null!(out);
        let path = tri!(path_arg(path));
        match BackboneModel::load(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(PpBackbone(m)));
                PpStatus::Ok
            }
            Err(e @ pareidolia_core::backbone::BackboneError::Io { .. }) => fail(PpStatus::Io, e.to_string()),
            Err(e) => fail(PpStatus::Malformed, e.to_string()),
        }
    })
}

/// # Safety
/// `backbone` must come from [`pp_backbone_load`] and not be freed yet.
#[no_mangle]
pub unsafe extern "C" fn pp_backbone_feature_dim(backbone: *const PpBackbone, out: *mut usize) -> PpStatus {
    guard(|| {
        non_null!(backbone, out);
        *out = (*backbone).0.feature_dim();
        PpStatus::Ok
    })
}

/// Copies the 32-character model hash plus a NUL into `buf`.
///
/// # Safety
/// `buf` must hold at least `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pp_backbone_model_hash(backbone: *const PpBackbone, buf: *mut c_char, len: usize) -> PpStatus {
    guard(|| {
        non_null!(backbone, buf);
        let hash = (*backbone).0.model_hash().as_bytes();
        if len < hash.len() + 1 {
            return fail(PpStatus::BufferTooSmall, format!("need {} bytes", hash.len() + 1));
        }
        std::ptr::copy_nonoverlapping(hash.as_ptr() as *const c_char, buf, hash.len());
        *buf.add(hash.len()) = 0;
        PpStatus::Ok
    })
}

/// Runs `n_images` preprocessed images (each [`pp_image_len`] floats,
/// channel-major) through the backbone and writes `n_images × d` features
/// row-major into `out`.
///
/// # Safety
/// `pixels` must hold `n_images * pp_image_len()` floats and `out`
/// `n_images * d` floats.
#[no_mangle]
pub unsafe extern "C" fn pp_backbone_extract(
    backbone: *const PpBackbone,
    pixels: *const f32,
    n_images: usize,
    out: *mut f32,
) -> PpStatus {
    guard(|| {
        non_null!(backbone, out);
        if n_images == 0 {
            return fail(PpStatus::InvalidArgument, "n_images must be positive");
        }
        let pixels = tri!(slice_arg(pixels, n_images * TENSOR_LEN, "pixels"));
        let model = &(*backbone).0;
        let images: Vec<PixelTensor> =
            pixels.chunks_exact(TENSOR_LEN).map(|c| PixelTensor::from_vec(c.to_vec()).expect("exact chunk")).collect();
        let ids = (0..n_images).map(|i| i.to_string()).collect();
        match model.extract_features(&images, ids, Orientation::Upright, n_images) {
            Ok(fm) => {
                std::ptr::copy_nonoverlapping(fm.values().as_ptr(), out, fm.values().len());
                PpStatus::Ok
            }
            Err(e @ pareidolia_core::backbone::BackboneError::NonFinite { .. }) => {
                fail(PpStatus::Numerical, e.to_string())
            }
            Err(e) => fail(PpStatus::Malformed, e.to_string()),
        }
    })
}

/// # Safety
/// `backbone` must come from [`pp_backbone_load`]; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pp_backbone_free(backbone: *mut PpBackbone) {
    if !backbone.is_null() {
        drop(Box::from_raw(backbone));
    }
}

/// Loads a head checkpoint written by the `train` stage.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pp_head_load(path: *const c_char, out: *mut *mut PpHead) -> PpStatus {
    guard(|| {
        non_null!(out);
        let path = tri!(path_arg(path));
        match head::read_checkpoint(path) {
            Ok((h, _)) => {
                *out = Box::into_raw(Box::new(PpHead(h)));
                PpStatus::Ok
            }
            Err(e @ head::HeadError::Io { .. }) => fail(PpStatus::Io, e.to_string()),
            Err(e) => fail(PpStatus::Malformed, e.to_string()),
        }
    })
}

/// Builds a head from `w` (d × 2, row-major: `w[2j + k]`) and `bias` (2).
///
/// # Safety
/// `w` must hold `2 * d` doubles, `bias` 2, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_head_new(d: usize, w: *const f64, bias: *const f64, out: *mut *mut PpHead) -> PpStatus {
    guard(|| {
        non_null!(out);
        let w = tri!(slice_arg(w, 2 * d, "w"));
        let b = tri!(slice_arg(bias, 2, "bias"));
        match LinearHead::from_parts(d, w.to_vec(), [b[0], b[1]]) {
            Ok(h) => {
                *out = Box::into_raw(Box::new(PpHead(h)));
                PpStatus::Ok
            }
            Err(e) => fail(PpStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `head` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pp_head_dim(head: *const PpHead, out: *mut usize) -> PpStatus {
    guard(|| {
        non_null!(head, out);
        *out = (*head).0.dim();
        PpStatus::Ok
    })
}

/// Softmax probabilities `[p_face, p_object]` for one feature vector.
///
/// # Safety
/// `features` must hold `d` floats and `out` 2 doubles.
#[no_mangle]
pub unsafe extern "C" fn pp_head_predict_proba(
    head: *const PpHead,
    features: *const f32,
    d: usize,
    out: *mut f64,
) -> PpStatus {
    guard(|| {
        non_null!(head, out);
        let x = tri!(slice_arg(features, d, "features"));
        match (*head).0.forward(x) {
            Ok(p) => {
                *out = p[0];
                *out.add(1) = p[1];
                PpStatus::Ok
            }
            Err(e) => fail(PpStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `head` must come from a `pp_head_*` constructor; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn pp_head_free(head: *mut PpHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Pearson correlation. Returns `Undefined` when either input is constant.
///
/// # Safety
/// `x` and `y` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pp_pearson_r(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> PpStatus {
    guard(|| {
        non_null!(out);
        let x = tri!(slice_arg(x, n, "x"));
        let y = tri!(slice_arg(y, n, "y"));
        match stats::pearson_r(x, y) {
            Ok(Some(r)) => {
                *out = r;
                PpStatus::Ok
            }
            Ok(None) => fail(PpStatus::Undefined, "correlation undefined for constant input"),
            Err(e) => fail(PpStatus::InvalidArgument, e.to_string()),
        }
    })
}

unsafe fn write_test(outcome: stats::Result<TestOutcome>, out: *mut PpStatResult) -> PpStatus {
    match outcome {
        Ok(TestOutcome::Defined(r)) => {
            *out = PpStatResult { t: r.t, df: r.df, p: r.p_raw, d: r.d, mean_difference: r.mean_difference };
            PpStatus::Ok
        }
        Ok(TestOutcome::Undefined { reason, .. }) => fail(PpStatus::Undefined, reason),
        Err(e) => fail(PpStatus::InvalidArgument, e.to_string()),
    }
}

/// Welch's unequal-variance t-test of `a` against `b`.
///
/// # Safety
/// `a` must hold `na` doubles, `b` `nb`, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_welch_t(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut PpStatResult,
) -> PpStatus {
    guard(|| {
        non_null!(out);
        let a = tri!(slice_arg(a, na, "a"));
        let b = tri!(slice_arg(b, nb, "b"));
        write_test(stats::t_test(TestKind::Welch, a, Some(b)), out)
    })
}

/// Paired t-test on `a[i] - b[i]`.
///
/// # Safety
/// `a` and `b` must hold `n` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_paired_t(a: *const f64, b: *const f64, n: usize, out: *mut PpStatResult) -> PpStatus {
    guard(|| {
        non_null!(out);
        let a = tri!(slice_arg(a, n, "a"));
        let b = tri!(slice_arg(b, n, "b"));
        write_test(stats::t_test(TestKind::Paired, a, Some(b)), out)
    })
}

/// One-sample t-test of `a` against `mu0`.
///
/// # Safety
/// `a` must hold `n` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_one_sample_t(a: *const f64, n: usize, mu0: f64, out: *mut PpStatResult) -> PpStatus {
    guard(|| {
        non_null!(out);
        let a = tri!(slice_arg(a, n, "a"));
        write_test(stats::t_test(TestKind::OneSample { mu0 }, a, None), out)
    })
}

/// `1 / (1 + exp(-a (x - b)))`.
#[no_mangle]
pub extern "C" fn pp_sigmoid(a: f64, b: f64, x: f64) -> f64 {
    psychometrics::sigmoid(a, b, x)
}

/// Least-squares sigmoid fit to `n` points.
///
/// # Safety
/// `x` and `y` must hold `n` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pp_fit_sigmoid(x: *const f64, y: *const f64, n: usize, out: *mut PpSigmoidFit) -> PpStatus {
    guard(|| {
        non_null!(out);
        let x = tri!(slice_arg(x, n, "x"));
        let y = tri!(slice_arg(y, n, "y"));
        let pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
        match psychometrics::fit_sigmoid(&pts) {
            Ok(SigmoidFit::Fitted(f)) => {
                *out = PpSigmoidFit { flat: 0, a: f.a, b: f.b, rss: f.rss, flat_value: f64::NAN };
                PpStatus::Ok
            }
            Ok(SigmoidFit::Flat { value }) => {
                *out = PpSigmoidFit { flat: 1, a: f64::NAN, b: f64::NAN, rss: 0.0, flat_value: value };
                PpStatus::Ok
            }
            Err(e) => fail(PpStatus::InvalidArgument, e.to_string()),
        }
    })
}
