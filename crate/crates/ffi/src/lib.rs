//! C ABI over the `dtpp` library.
//!
//! A fitted model pair is loaded into an opaque [`DtppModel`] handle. Every
//! fallible call returns a [`DtppStatus`]; on failure the message is available
//! from [`dtpp_last_error`] on the same thread. Marks are 1-based at this
//! boundary, and `0` means "no previous mark".

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dtpp::ctx_attention::{mark_pmf, MarkModel};
use dtpp::event_data::{Event, EventSequence};
use dtpp::inference::{predict_next, rollout};
use dtpp::io::{load_mark_model, load_mixture};
use dtpp::lognorm_mix::MixtureParams;
use dtpp::metrics::loglik_decomposed;
use dtpp::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtppStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    InvalidSequence = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Fitted inter-event mixture plus mark classifier.
pub struct DtppModel {
    mixture: MixtureParams,
    marks: MarkModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> DtppStatus {
    match err {
        Error::Io { .. } => DtppStatus::Io,
        Error::Parse { .. } | Error::Json(_) => DtppStatus::Parse,
        Error::Validation { .. } | Error::InvalidSequence(_) | Error::Masking { .. } => DtppStatus::InvalidSequence,
        Error::Domain(_) | Error::Overflow(_) | Error::NonFiniteLoss { .. } | Error::BoundViolation { .. } => {
            DtppStatus::Numeric
        }
        _ => DtppStatus::InvalidArgument,
    }
}

struct Failure(DtppStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DtppStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DtppStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DtppStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DtppStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(DtppStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn model_arg<'a>(m: *const DtppModel) -> Result<&'a DtppModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn prev_mark(model: &DtppModel, mark: u32) -> Result<Option<usize>, Failure> {
    match mark {
        0 => Ok(None),
        k if (k as usize) <= model.marks.num_marks() => Ok(Some(k as usize - 1)),
        k => Err(Failure(DtppStatus::InvalidArgument, format!("mark {k} out of range"))),
    }
}

/// Reads `n` events from parallel arrays; null arrays are allowed when `n == 0`.
unsafe fn history(
    model: &DtppModel,
    times: *const f64,
    marks: *const u32,
    n: usize,
) -> Result<Vec<Event>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if times.is_null() || marks.is_null() {
        return Err(null("event arrays"));
    }
    let times = std::slice::from_raw_parts(times, n);
    let marks = std::slice::from_raw_parts(marks, n);
    let mut events = Vec::with_capacity(n);
    let mut last = f64::NEG_INFINITY;
    for (&t, &k) in times.iter().zip(marks) {
        let mark = prev_mark(model, k)?.ok_or_else(|| Failure(DtppStatus::InvalidArgument, "event mark 0".into()))?;
        if !(t.is_finite() && t >= 0.0 && t > last) {
            return Err(Failure(
                DtppStatus::InvalidSequence,
                format!("event times must be finite, non-negative and increasing (got {t})"),
            ));
        }
        last = t;
        events.push(Event::new(t, mark));
    }
    Ok(events)
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dtpp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// NUL-terminated library version.
#[no_mangle]
pub extern "C" fn dtpp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a mixture document and a mark-model document written by the CLI.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dtpp_model_load(
    mixture_path: *const c_char,
    marks_path: *const c_char,
    out: *mut *mut DtppModel,
) -> DtppStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mixture = load_mixture(path_arg(mixture_path, "mixture_path")?)?;
        let marks = load_mark_model(path_arg(marks_path, "marks_path")?)?;
        if mixture.num_marks() != marks.num_marks() {
            return Err(Failure(
                DtppStatus::InvalidArgument,
                format!("mixture has K={} but the mark model has K={}", mixture.num_marks(), marks.num_marks()),
            ));
        }
        out.write(Box::into_raw(Box::new(DtppModel { mixture, marks })));
        Ok(())
    })
}

/// Releases a handle from [`dtpp_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`dtpp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dtpp_model_free(model: *mut DtppModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mark alphabet size, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dtpp_model_num_marks(model: *const DtppModel) -> usize {
    model.as_ref().map_or(0, |m| m.marks.num_marks())
}

/// `ln g(tau | prev_mark)`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dtpp_log_pdf(model: *const DtppModel, tau: f64, prev: u32, out: *mut f64) -> DtppStatus {
    guard(|| {
        let m = model_arg(model)?;
        let v = m.mixture.log_pdf(tau, prev_mark(m, prev)?)?;
        write(out, v, "out")
    })
}

/// Mean inter-event time after `prev_mark`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dtpp_mean_gap(model: *const DtppModel, prev: u32, out: *mut f64) -> DtppStatus {
    guard(|| {
        let m = model_arg(model)?;
        let v = m.mixture.mean(prev_mark(m, prev)?)?;
        write(out, v, "out")
    })
}

/// Mark distribution at time `t` given `n` history events; `out[k-1]` receives `p(k | t)`.
///
/// # Safety
/// `times`/`marks` must hold `n` entries; `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dtpp_mark_pmf(
    model: *const DtppModel,
    times: *const f64,
    marks: *const u32,
    n: usize,
    t: f64,
    out: *mut f64,
    out_len: usize,
) -> DtppStatus {
    guard(|| {
        let m = model_arg(model)?;
        let hist = history(m, times, marks, n)?;
        let k = m.marks.num_marks();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < k {
            return Err(Failure(DtppStatus::BufferTooSmall, format!("need {k} entries, got {out_len}")));
        }
        let p = mark_pmf(&m.marks, &hist, t)?;
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(&p);
        Ok(())
    })
}

/// Next-event prediction. Pass NaN as `true_next_time` to evaluate the mark at
/// the predicted time instead of a known one.
///
/// # Safety
/// `times`/`marks` must hold `n` entries; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn dtpp_predict_next(
    model: *const DtppModel,
    times: *const f64,
    marks: *const u32,
    n: usize,
    true_next_time: f64,
    time_out: *mut f64,
    mark_out: *mut u32,
) -> DtppStatus {
    guard(|| {
        let m = model_arg(model)?;
        let hist = history(m, times, marks, n)?;
        let truth = (!true_next_time.is_nan()).then_some(true_next_time);
        let (t, k) = predict_next(&m.mixture, &m.marks, &hist, truth)?;
        write(time_out, t, "time_out")?;
        write(mark_out, k as u32 + 1, "mark_out")
    })
}

/// Deterministic rollout of `p` events into `times_out[0..p]` / `marks_out[0..p]`.
///
/// # Safety
/// Inputs must hold `n` entries; outputs must hold `p` entries.
#[no_mangle]
pub unsafe extern "C" fn dtpp_rollout(
    model: *const DtppModel,
    times: *const f64,
    marks: *const u32,
    n: usize,
    p: usize,
    times_out: *mut f64,
    marks_out: *mut u32,
) -> DtppStatus {
    guard(|| {
        let m = model_arg(model)?;
        let hist = history(m, times, marks, n)?;
        if times_out.is_null() || marks_out.is_null() {
            return Err(null("output arrays"));
        }
        let h = rollout(&m.mixture, &m.marks, &hist, p)?;
        let ts = std::slice::from_raw_parts_mut(times_out, p);
        let ks = std::slice::from_raw_parts_mut(marks_out, p);
        for (i, e) in h.events.iter().enumerate() {
            ts[i] = e.time;
            ks[i] = e.mark as u32 + 1;
        }
        Ok(())
    })
}

/// Log-likelihood of a sequence observed on `[0, window_end)`.
///
/// # Safety
/// `times`/`marks` must hold `n` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dtpp_loglik(
    model: *const DtppModel,
    times: *const f64,
    marks: *const u32,
    n: usize,
    window_end: f64,
    out: *mut f64,
) -> DtppStatus {
    guard(|| {
        let m = model_arg(model)?;
        let seq = EventSequence::new(history(m, times, marks, n)?, window_end)?;
        let v = loglik_decomposed(&m.mixture, &m.marks, &seq)?;
        write(out, v, "out")
    })
}
