//! C ABI over the `alpha-margin` solver, losses, verification metrics and the
//! dataset/checkpoint formats.
//!
//! Conventions:
//! - Every fallible function returns an [`AmStatus`]; on failure a message is
//!   available from [`am_last_error`] on the same thread.
//! - Arrays are passed as pointer plus length; output buffers are provided by
//!   the caller.
//! - Datasets and models are opaque handles created by `*_load` and released
//!   with the matching `*_free`.
//! - Panics never cross the boundary; they surface as `AM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use alpha_margin::evalkit::{frr_at_far, FarOutcome, TrialScoreSet};
use alpha_margin::losses::evaluate_loss;
use alpha_margin::model::{Embed, Model};
use alpha_margin::synthdata::{self, Dataset};
use alpha_margin::{
    alpha::alpha_softargmax_with_tau, alpha_softmax, fy_loss, AlphaParams, CosineVector, Error,
    LogitVector, MarginConfig, MarginMode, ReferenceMeasure,
};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidParameter = 2,
    Domain = 3,
    DimensionMismatch = 4,
    IndexOutOfRange = 5,
    Solver = 6,
    Io = 7,
    Format = 8,
    Empty = 9,
    /// FRR@FAR target below the impostor resolution; no threshold reported.
    Unattainable = 10,
    Panic = 11,
}

/// Loss family selector for [`am_margin_loss`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmMarginMode {
    QMargin = 0,
    A3m = 1,
    CosFace = 2,
    ArcFace = 3,
}

impl From<AmMarginMode> for MarginMode {
    fn from(m: AmMarginMode) -> Self {
        match m {
            AmMarginMode::QMargin => MarginMode::QMargin,
            AmMarginMode::A3m => MarginMode::A3m,
            AmMarginMode::CosFace => MarginMode::CosFace,
            AmMarginMode::ArcFace => MarginMode::ArcFace,
        }
    }
}

/// Opaque dataset handle.
pub struct AmDataset(Dataset);

/// Opaque model handle (embedder plus prototype head).
pub struct AmModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> AmStatus {
    match err {
        Error::InvalidParameter(_) | Error::Config(_) => AmStatus::InvalidParameter,
        Error::Domain(_) => AmStatus::Domain,
        Error::DimensionMismatch { .. } => AmStatus::DimensionMismatch,
        Error::IndexOutOfRange { .. } => AmStatus::IndexOutOfRange,
        Error::Solver(_) | Error::NonFiniteGradient(_) => AmStatus::Solver,
        Error::Io(_) => AmStatus::Io,
        Error::CorruptHeader { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::Parse(_) => AmStatus::Format,
        Error::Empty(_) => AmStatus::Empty,
    }
}

struct Fail(AmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn null(name: &str) -> Fail {
    Fail(AmStatus::NullPointer, format!("{name} is null"))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> FfiResult<AmStatus>) -> AmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(&format!("internal panic: {msg}"));
            AmStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `len` readable `f64`s.
unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> FfiResult<&'a [f64]> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable `f64`s.
unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> FfiResult<&'a mut [f64]> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `q` must be null or point to `k` readable `f64`s.
unsafe fn reference(q: *const f64, k: usize) -> FfiResult<ReferenceMeasure> {
    if q.is_null() {
        Ok(ReferenceMeasure::ones(k))
    } else {
        Ok(ReferenceMeasure::new(slice(q, k, "q")?.to_vec())?)
    }
}

/// # Safety
/// `path` must be null or a NUL-terminated string.
unsafe fn path_arg(path: *const c_char) -> FfiResult<PathBuf> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Fail(AmStatus::InvalidParameter, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Message describing the last failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn am_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn am_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// α-softargmax of `theta` (length `k`) against reference weights `q`
/// (null for all ones). Writes the posterior to `out_p` (length `k`) and, if
/// `out_tau` is not null, the threshold τ*.
///
/// # Safety
/// `theta` and `out_p` must point to `k` `f64`s; `q` to `k` `f64`s or null;
/// `out_tau` to one `f64` or null.
#[no_mangle]
pub unsafe extern "C" fn am_alpha_softargmax(
    theta: *const f64,
    q: *const f64,
    k: usize,
    alpha: f64,
    out_p: *mut f64,
    out_tau: *mut f64,
) -> AmStatus {
    guard(|| {
        let theta = LogitVector::new(slice(theta, k, "theta")?.to_vec())?;
        let q = reference(q, k)?;
        let params = AlphaParams::new(alpha)?;
        let out = slice_mut(out_p, k, "out_p")?;
        let (tau, p) = alpha_softargmax_with_tau(&theta, &q, &params)?;
        out.copy_from_slice(&p.to_dense());
        if !out_tau.is_null() {
            *out_tau = tau;
        }
        Ok(AmStatus::Ok)
    })
}

/// Regularized maximum `softmax_f(θ) = max_p ⟨p, θ⟩ − D_f(p : q)`.
///
/// # Safety
/// `theta` must point to `k` `f64`s; `q` to `k` `f64`s or null; `out_value`
/// to one `f64`.
#[no_mangle]
pub unsafe extern "C" fn am_alpha_softmax(
    theta: *const f64,
    q: *const f64,
    k: usize,
    alpha: f64,
    out_value: *mut f64,
) -> AmStatus {
    guard(|| {
        let theta = LogitVector::new(slice(theta, k, "theta")?.to_vec())?;
        let q = reference(q, k)?;
        let params = AlphaParams::new(alpha)?;
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        *out_value = alpha_softmax(&theta, &q, &params)?;
        Ok(AmStatus::Ok)
    })
}

/// Fenchel-Young loss of logits `theta` for target `y`. Writes the value and,
/// if `out_grad` is not null, the gradient `p* − e_y` (length `k`).
///
/// # Safety
/// `theta` must point to `k` `f64`s; `q` to `k` `f64`s or null; `out_value`
/// to one `f64`; `out_grad` to `k` `f64`s or null.
#[no_mangle]
pub unsafe extern "C" fn am_fy_loss(
    theta: *const f64,
    q: *const f64,
    k: usize,
    y: usize,
    alpha: f64,
    out_value: *mut f64,
    out_grad: *mut f64,
) -> AmStatus {
    guard(|| {
        let theta = LogitVector::new(slice(theta, k, "theta")?.to_vec())?;
        let q = reference(q, k)?;
        let params = AlphaParams::new(alpha)?;
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        let out = fy_loss(&theta, y, &q, &params)?;
        *out_value = out.value;
        if !out_grad.is_null() {
            slice_mut(out_grad, k, "out_grad")?.copy_from_slice(&out.grad_logits);
        }
        Ok(AmStatus::Ok)
    })
}

/// Margin loss over cosine similarities `cosines` (length `k`). `alpha` is
/// ignored by the cross-entropy baselines. Writes the value and, if
/// `out_grad_logits` is not null, the gradient with respect to the logits
/// the loss consumes.
///
/// # Safety
/// `cosines` must point to `k` `f64`s; `out_value` to one `f64`;
/// `out_grad_logits` to `k` `f64`s or null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn am_margin_loss(
    cosines: *const f64,
    k: usize,
    y: usize,
    mode: AmMarginMode,
    scale: f64,
    margin: f64,
    alpha: f64,
    out_value: *mut f64,
    out_grad_logits: *mut f64,
) -> AmStatus {
    guard(|| {
        let c = CosineVector::new(slice(cosines, k, "cosines")?.to_vec())?;
        let cfg = MarginConfig::new(mode.into(), scale, margin)?;
        let params = AlphaParams::new(alpha)?;
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        let out = evaluate_loss(&c, y, &cfg, &params)?;
        *out_value = out.value;
        if !out_grad_logits.is_null() {
            slice_mut(out_grad_logits, k, "out_grad_logits")?.copy_from_slice(&out.grad_logits);
        }
        Ok(AmStatus::Ok)
    })
}

/// FRR at the smallest impostor-score threshold whose FAR is at most
/// `far_target`. Returns `AM_STATUS_UNATTAINABLE` (writing the smallest
/// resolvable FAR to `out_far`) when no threshold qualifies.
///
/// # Safety
/// `genuine` must point to `n_genuine` `f64`s and `impostor` to `n_impostor`;
/// the three outputs must each point to one `f64`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn am_frr_at_far(
    genuine: *const f64,
    n_genuine: usize,
    impostor: *const f64,
    n_impostor: usize,
    far_target: f64,
    out_frr: *mut f64,
    out_threshold: *mut f64,
    out_far: *mut f64,
) -> AmStatus {
    guard(|| {
        let scores = TrialScoreSet {
            genuine: slice(genuine, n_genuine, "genuine")?.to_vec(),
            impostor: slice(impostor, n_impostor, "impostor")?.to_vec(),
        };
        if out_frr.is_null() || out_threshold.is_null() || out_far.is_null() {
            return Err(null("output pointer"));
        }
        match frr_at_far(&scores, far_target)? {
            FarOutcome::Attained {
                frr,
                threshold,
                far,
            } => {
                *out_frr = frr;
                *out_threshold = threshold;
                *out_far = far;
                Ok(AmStatus::Ok)
            }
            FarOutcome::Unattainable { min_far } => {
                *out_far = min_far;
                Err(Fail(
                    AmStatus::Unattainable,
                    format!("FAR {far_target} is below the impostor resolution (min {min_far})"),
                ))
            }
        }
    })
}

/// Loads a dataset file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_load(
    path: *const c_char,
    out: *mut *mut AmDataset,
) -> AmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ds = synthdata::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AmDataset(ds)));
        Ok(AmStatus::Ok)
    })
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle from [`am_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_free(ds: *mut AmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of rows, feature dimension and identity count.
///
/// # Safety
/// `ds` must be a live handle; each output must be null or point to one
/// `usize`.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_shape(
    ds: *const AmDataset,
    out_len: *mut usize,
    out_dim: *mut usize,
    out_ids: *mut usize,
) -> AmStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.0;
        for (p, v) in [
            (out_len, ds.len()),
            (out_dim, ds.dim()),
            (out_ids, ds.num_ids()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(AmStatus::Ok)
    })
}

/// Copies row `i` (length `dim`) to `out_row` and its label to `out_label`.
///
/// # Safety
/// `ds` must be a live handle; `out_row` must point to `dim` `f64`s;
/// `out_label` must be null or point to one `u32`.
#[no_mangle]
pub unsafe extern "C" fn am_dataset_row(
    ds: *const AmDataset,
    i: usize,
    out_row: *mut f64,
    dim: usize,
    out_label: *mut u32,
) -> AmStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("ds"))?.0;
        if i >= ds.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: ds.len(),
            }
            .into());
        }
        if dim != ds.dim() {
            return Err(Error::DimensionMismatch {
                expected: ds.dim(),
                got: dim,
            }
            .into());
        }
        slice_mut(out_row, dim, "out_row")?.copy_from_slice(ds.row(i));
        if !out_label.is_null() {
            *out_label = ds.labels()[i];
        }
        Ok(AmStatus::Ok)
    })
}

/// Loads a model checkpoint into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn am_model_load(path: *const c_char, out: *mut *mut AmModel) -> AmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = Model::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AmModel(model)));
        Ok(AmStatus::Ok)
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`am_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_model_free(model: *mut AmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input dimension, embedding dimension and number of prototypes.
///
/// # Safety
/// `model` must be a live handle; each output must be null or point to one
/// `usize`.
#[no_mangle]
pub unsafe extern "C" fn am_model_shape(
    model: *const AmModel,
    out_input_dim: *mut usize,
    out_embedding_dim: *mut usize,
    out_prototypes: *mut usize,
) -> AmStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let dims = [
            (out_input_dim, m.embedder.input_dim()),
            (out_embedding_dim, m.embedder.output_dim()),
            (out_prototypes, m.k),
        ];
        for (p, v) in dims {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(AmStatus::Ok)
    })
}

/// Unit-norm embedding of `x` (length `d_in`) written to `out` (length
/// `d_out`).
///
/// # Safety
/// `model` must be a live handle; `x` must point to `d_in` `f64`s and `out`
/// to `d_out` `f64`s.
#[no_mangle]
pub unsafe extern "C" fn am_model_embed(
    model: *const AmModel,
    x: *const f64,
    d_in: usize,
    out: *mut f64,
    d_out: usize,
) -> AmStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let (want_in, want_out) = (m.embedder.input_dim(), m.embedder.output_dim());
        if d_in != want_in {
            return Err(Error::DimensionMismatch {
                expected: want_in,
                got: d_in,
            }
            .into());
        }
        if d_out != want_out {
            return Err(Error::DimensionMismatch {
                expected: want_out,
                got: d_out,
            }
            .into());
        }
        let e = m.embedder.embed(slice(x, d_in, "x")?);
        slice_mut(out, d_out, "out")?.copy_from_slice(&e);
        Ok(AmStatus::Ok)
    })
}
