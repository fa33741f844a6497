//! C interface to tempofeat.
//!
//! Every function returns a [`TfStatus`]. On failure a message describing the
//! last error on the calling thread is available from [`tf_last_error`].
//! Datasets and trained models are opaque handles released with their `_free`
//! functions.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use tempofeat::data::{load_dataset, DataPaths, Dataset};
use tempofeat::eval::roc_auc;
use tempofeat::features::{clumpiness, ActivityTimeline};
use tempofeat::pipeline::{Predictions, TrainedPipeline};
use tempofeat::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Integrity = 5,
    Singular = 6,
    Config = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Loaded dataset.
pub struct TfDataset(Dataset);

/// Trained pipeline read from `model.json`.
pub struct TfModel(TrainedPipeline);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("no interior nul"));
}

fn status_of(e: &Error) -> TfStatus {
    match e {
        Error::Parse { .. } | Error::Csv(_) | Error::Json(_) | Error::UnknownCategory { .. } => {
            TfStatus::Parse
        }
        Error::Io { .. } => TfStatus::Io,
        Error::Integrity(_) => TfStatus::Integrity,
        Error::Singular(_) => TfStatus::Singular,
        Error::Config(_) => TfStatus::Config,
        _ => TfStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (TfStatus, String)>) -> TfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TfStatus::Panic
        }
    }
}

fn lib(e: Error) -> (TfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (TfStatus, String) {
    (TfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (TfStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (TfStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (TfStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Clumpiness of the activity days `days[0..n]` (1-based, at most `horizon`).
///
/// # Safety
/// `days` must point to `n` readable values and `out` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn tf_clumpiness(
    days: *const u32,
    n: usize,
    horizon: u32,
    out: *mut f64,
) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let days = slice(days, n, "days")?;
        let tl = ActivityTimeline::new(0, days.iter().copied(), horizon).map_err(lib)?;
        *out = clumpiness(&tl);
        Ok(())
    })
}

/// ROC AUC of `scores` against 0/1 `labels`, ties counted one half.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable values, `out` to a
/// writable double.
#[no_mangle]
pub unsafe extern "C" fn tf_roc_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = slice(scores, n, "scores")?;
        let l: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&v| v != 0).collect();
        *out = roc_auc(s, &l).map_err(lib)?;
        Ok(())
    })
}

/// Loads `users.csv`, `activities.csv`, `branches.csv` and the optional
/// `visits.csv` from `dir`.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tf_dataset_load(dir: *const c_char, out: *mut *mut TfDataset) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let dir = path_arg(dir, "dir")?;
        let ds = load_dataset(&DataPaths::in_dir(dir)).map_err(lib)?;
        *out = Box::into_raw(Box::new(TfDataset(ds)));
        Ok(())
    })
}

/// Number of users in a dataset (0 for a null handle).
///
/// # Safety
/// `ds` must be null or a handle from [`tf_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn tf_dataset_num_users(ds: *const TfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.users.len())
}

/// # Safety
/// `ds` must be null or a handle from [`tf_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tf_dataset_free(ds: *mut TfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Reads a trained pipeline written by `tempofeat train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tf_model_load(path: *const c_char, out: *mut *mut TfModel) -> TfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = path_arg(path, "path")?;
        let m = TrainedPipeline::load(path).map_err(lib)?;
        *out = Box::into_raw(Box::new(TfModel(m)));
        Ok(())
    })
}

/// 1 for a branch-visit model, 2 for an up-sell model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a handle from [`tf_model_load`].
#[no_mangle]
pub unsafe extern "C" fn tf_model_task(model: *const TfModel) -> u8 {
    model.as_ref().map_or(0, |m| m.0.task())
}

/// # Safety
/// `model` must be null or a handle from [`tf_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tf_model_free(model: *mut TfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Up-sell scores for every user of `ds`, in user id order.
///
/// Writes up to `capacity` entries and sets `*written` to the number of
/// users; fails with `BufferTooSmall` (and writes nothing) when it exceeds
/// `capacity`.
///
/// # Safety
/// Handles must be valid; `user_ids` and `scores` must have room for
/// `capacity` values; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_model_predict_scores(
    model: *const TfModel,
    ds: *const TfDataset,
    user_ids: *mut u64,
    scores: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> TfStatus {
    guard(|| {
        let (m, d) = (model.as_ref().ok_or_else(|| null("model"))?, ds.as_ref().ok_or_else(|| null("dataset"))?);
        if written.is_null() {
            return Err(null("written"));
        }
        let Predictions::Task2(p) = m.0.predict(&d.0).map_err(lib)? else {
            return Err((TfStatus::InvalidArgument, "model predicts branch visits; use tf_model_predict_top5".into()));
        };
        *written = p.len();
        if p.len() > capacity {
            return Err((TfStatus::BufferTooSmall, format!("{} users, capacity {capacity}", p.len())));
        }
        if !p.is_empty() && (user_ids.is_null() || scores.is_null()) {
            return Err(null("output buffer"));
        }
        for (i, (u, s)) in p.into_iter().enumerate() {
            *user_ids.add(i) = u;
            *scores.add(i) = s;
        }
        Ok(())
    })
}

/// Top-5 branches per user of `ds`, in user id order.
///
/// User `i` fills slots `5 i .. 5 i + 5` of `branches` and `visits`; unused
/// slots hold branch `UINT32_MAX` and 0 visits. Buffer sizing follows
/// [`tf_model_predict_scores`], with `capacity` counted in users.
///
/// # Safety
/// Handles must be valid; `user_ids` must have room for `capacity` values,
/// `branches` and `visits` for `5 * capacity`; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tf_model_predict_top5(
    model: *const TfModel,
    ds: *const TfDataset,
    user_ids: *mut u64,
    branches: *mut u32,
    visits: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> TfStatus {
    guard(|| {
        let (m, d) = (model.as_ref().ok_or_else(|| null("model"))?, ds.as_ref().ok_or_else(|| null("dataset"))?);
        if written.is_null() {
            return Err(null("written"));
        }
        let Predictions::Task1(p) = m.0.predict(&d.0).map_err(lib)? else {
            return Err((TfStatus::InvalidArgument, "model predicts up-sell scores; use tf_model_predict_scores".into()));
        };
        *written = p.len();
        if p.len() > capacity {
            return Err((TfStatus::BufferTooSmall, format!("{} users, capacity {capacity}", p.len())));
        }
        if !p.is_empty() && (user_ids.is_null() || branches.is_null() || visits.is_null()) {
            return Err(null("output buffer"));
        }
        for (i, (u, top)) in p.into_iter().enumerate() {
            *user_ids.add(i) = u;
            for k in 0..5 {
                let (b, v) = top.get(k).copied().unwrap_or((u32::MAX, 0.0));
                *branches.add(5 * i + k) = b;
                *visits.add(5 * i + k) = v;
            }
        }
        Ok(())
    })
}
