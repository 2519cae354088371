//! C ABI over the depthflow predictor and depth metrics.
//!
//! Every function returns a [`DfStatus`]. On failure the message is kept per
//! thread and read with [`df_last_error_message`]. Models are opaque handles
//! created by [`df_model_load`] and released with [`df_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use depthflow::denoiser::Denoiser;
use depthflow::infer::{InferConfig, Predictor};
use depthflow::metrics::aligned_scores;
use depthflow::{Error, Tensor};

/// Outcome of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Numerical = 6,
    Panic = 7,
}

/// A loaded predictor.
pub struct DfModel {
    predictor: Predictor,
}

/// Scores after a least-squares scale and shift of the prediction.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DfScores {
    pub absrel: f64,
    pub delta1: f64,
    pub scale: f64,
    pub shift: f64,
    pub valid_fraction: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DfStatus {
    match e {
        Error::Shape(_) => DfStatus::Shape,
        Error::InvalidArgument(_) | Error::InvalidPose(_) => DfStatus::InvalidArgument,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) => DfStatus::Io,
        Error::Checkpoint(_) => DfStatus::Checkpoint,
        Error::DegenerateDepth { .. }
        | Error::DegenerateAlignment(_)
        | Error::NonPositiveDepth(_)
        | Error::Autodiff(_) => DfStatus::Numerical,
    }
}

struct Fail(DfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DfStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn df_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a base checkpoint and, if `interp_path` is not null, a keyframe
/// interpolation checkpoint. `*out` receives the handle.
///
/// # Safety
/// Paths must be null or NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_model_load(
    base_path: *const c_char,
    interp_path: *const c_char,
    steps: usize,
    ensemble: usize,
    seed: u64,
    out: *mut *mut DfModel,
) -> DfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let base = Denoiser::load(&path_arg(base_path, "base_path")?)?;
        let interp = if interp_path.is_null() {
            None
        } else {
            Some(Denoiser::load(&path_arg(interp_path, "interp_path")?)?)
        };
        let config = InferConfig {
            steps,
            ensemble,
            seed,
            ..Default::default()
        };
        let predictor = Predictor::new(base, interp, config)?;
        *out = Box::into_raw(Box::new(DfModel { predictor }));
        Ok(())
    })
}

/// Releases a handle from [`df_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`df_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn df_model_free(model: *mut DfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts depth for `frames` RGB frames in [0, 1], laid out as
/// `frames x 3 x height x width`. Writes `frames x height x width` depths.
///
/// # Safety
/// `rgb` must hold `frames*3*height*width` values and `depth_out` must have
/// room for `depth_len` values.
#[no_mangle]
pub unsafe extern "C" fn df_model_predict(
    model: *const DfModel,
    rgb: *const f64,
    frames: usize,
    height: usize,
    width: usize,
    depth_out: *mut f64,
    depth_len: usize,
) -> DfStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if depth_out.is_null() {
            return Err(null("depth_out"));
        }
        let n = frames * height * width;
        if depth_len != n {
            return Err(Fail(
                DfStatus::Shape,
                format!("depth_len {depth_len} but the prediction holds {n} values"),
            ));
        }
        let input = slice_arg(rgb, 3 * n, "rgb")?;
        let x = Tensor::new(vec![frames, 3, height, width], input.to_vec())?;
        let pred = model.predictor.predict(&x)?;
        std::slice::from_raw_parts_mut(depth_out, n).copy_from_slice(pred.depth.data());
        Ok(())
    })
}

/// AbsRel and δ1 of `pred` against `gt` over the positive ground-truth
/// pixels, after the best scale and shift.
///
/// # Safety
/// `pred` and `gt` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn df_aligned_scores(
    pred: *const f64,
    gt: *const f64,
    len: usize,
    out: *mut DfScores,
) -> DfStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let p = Tensor::new(vec![len], slice_arg(pred, len, "pred")?.to_vec())?;
        let g = Tensor::new(vec![len], slice_arg(gt, len, "gt")?.to_vec())?;
        let s = aligned_scores(&p, &g)?;
        *out = DfScores {
            absrel: s.absrel,
            delta1: s.delta1,
            scale: s.alignment.scale,
            shift: s.alignment.shift,
            valid_fraction: s.valid_fraction,
        };
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
