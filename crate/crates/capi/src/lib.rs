//! C ABI over the core library: opaque handles for datasets and trained
//! models, integer status codes, and a thread-local last-error message.
//!
//! Conventions:
//! - Every function returns a [`ProtovaeStatus`]; results travel through
//!   out-parameters. `PROTOVAE_STATUS_OK` is 0.
//! - Handles are created by `*_open`/`*_load` and released by the matching
//!   `*_free`; `free(NULL)` is a no-op. Handles are not thread-safe.
//! - On any non-OK status the failing thread's message is readable via
//!   [`protovae_last_error`] until the next failure on that thread.
//! - Panics never unwind across the boundary; they surface as
//!   `PROTOVAE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, size_t};

use protovae::cli::resolve_dataset;
use protovae::data::GroundTruthDataset;
use protovae::error::Error;
use protovae::metrics::{embed_indices, evaluate, representation_from_checkpoint, EvalConfig, Representation};
use protovae::trainer::{train, TrainConfig};

/// Result of every C-ABI call.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtovaeStatus {
    Ok = 0,
    /// A required pointer was NULL.
    NullArgument = 1,
    /// Arguments or configuration were rejected.
    InvalidArgument = 2,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 3,
    /// The operation itself failed (I/O, malformed file, diverged run...).
    Failure = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(status: ProtovaeStatus, message: &str) -> ProtovaeStatus {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NULs stripped");
    });
    status
}

fn set_core_error(err: Error) -> ProtovaeStatus {
    let status = match err {
        Error::Config(_) | Error::Shape(_) => ProtovaeStatus::InvalidArgument,
        _ => ProtovaeStatus::Failure,
    };
    set_error(status, &err.to_string())
}

/// Run a closure with panics converted to a status code.
fn guarded<F: FnOnce() -> ProtovaeStatus>(f: F) -> ProtovaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(ProtovaeStatus::Panic, &msg)
        }
    }
}

/// Borrow a C string argument as UTF-8.
///
/// # Safety
/// `ptr` must be NULL or a NUL-terminated string valid for the call.
unsafe fn utf8_arg<'a>(name: &str, ptr: *const c_char) -> Result<&'a str, ProtovaeStatus> {
    if ptr.is_null() {
        return Err(set_error(
            ProtovaeStatus::NullArgument,
            &format!("{name} is NULL"),
        ));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(
            ProtovaeStatus::InvalidUtf8,
            &format!("{name} is not valid UTF-8"),
        )
    })
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn protovae_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn protovae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Opaque ground-truth dataset handle.
pub struct ProtovaeDataset {
    inner: GroundTruthDataset,
}

/// Open a dataset from a spec string: `toy` (built-in grid), a path to a
/// sprite-grid `.toml` config, or a path to a generated archive.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn protovae_dataset_open(
    spec: *const c_char,
    out: *mut *mut ProtovaeDataset,
) -> ProtovaeStatus {
    guarded(|| {
        if out.is_null() {
            return set_error(ProtovaeStatus::NullArgument, "out is NULL");
        }
        let spec = match utf8_arg("spec", spec) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match resolve_dataset(spec) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(ProtovaeDataset { inner }));
                ProtovaeStatus::Ok
            }
            Err(e) => set_core_error(e),
        }
    })
}

/// Number of images (the full factor product).
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn protovae_dataset_len(
    dataset: *const ProtovaeDataset,
    out: *mut u64,
) -> ProtovaeStatus {
    guarded(|| {
        if dataset.is_null() || out.is_null() {
            return set_error(ProtovaeStatus::NullArgument, "dataset or out is NULL");
        }
        *out = (*dataset).inner.len() as u64;
        ProtovaeStatus::Ok
    })
}

/// Number of ground-truth factors.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn protovae_dataset_num_factors(
    dataset: *const ProtovaeDataset,
    out: *mut u64,
) -> ProtovaeStatus {
    guarded(|| {
        if dataset.is_null() || out.is_null() {
            return set_error(ProtovaeStatus::NullArgument, "dataset or out is NULL");
        }
        *out = (*dataset).inner.num_factors() as u64;
        ProtovaeStatus::Ok
    })
}

/// Cardinality of one factor.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn protovae_dataset_radix(
    dataset: *const ProtovaeDataset,
    factor: u64,
    out: *mut u64,
) -> ProtovaeStatus {
    guarded(|| {
        if dataset.is_null() || out.is_null() {
            return set_error(ProtovaeStatus::NullArgument, "dataset or out is NULL");
        }
        let radices = (*dataset).inner.radices();
        match radices.get(factor as usize) {
            Some(&r) => {
                *out = r as u64;
                ProtovaeStatus::Ok
            }
            None => set_error(
                ProtovaeStatus::InvalidArgument,
                &format!("factor {factor} out of range for {} factors", radices.len()),
            ),
        }
    })
}

/// Image geometry: height, width, channels.
///
/// # Safety
/// `dataset` must be a live handle; the three out-pointers must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn protovae_dataset_image_shape(
    dataset: *const ProtovaeDataset,
    out_height: *mut u64,
    out_width: *mut u64,
    out_channels: *mut u64,
) -> ProtovaeStatus {
    guarded(|| {
        if dataset.is_null() || out_height.is_null() || out_width.is_null() || out_channels.is_null()
        {
            return set_error(ProtovaeStatus::NullArgument, "dataset or an out pointer is NULL");
        }
        let (h, w, c) = (*dataset).inner.image_shape();
        *out_height = h as u64;
        *out_width = w as u64;
        *out_channels = c as u64;
        ProtovaeStatus::Ok
    })
}

/// Release a dataset handle. NULL is ignored.
///
/// # Safety
/// `dataset` must have come from [`protovae_dataset_open`] and not been
/// freed before.
#[no_mangle]
pub unsafe extern "C" fn protovae_dataset_free(dataset: *mut ProtovaeDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Train a model from a TOML config string; checkpoints and the metrics
/// log land in `out_dir`. The config's `dataset` key is resolved exactly
/// like [`protovae_dataset_open`]'s spec.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn protovae_train(
    config_toml: *const c_char,
    out_dir: *const c_char,
) -> ProtovaeStatus {
    guarded(|| {
        let config_toml = match utf8_arg("config_toml", config_toml) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let out_dir = match utf8_arg("out_dir", out_dir) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let config = match TrainConfig::from_toml_str(config_toml) {
            Ok(c) => c,
            Err(e) => return set_core_error(e),
        };
        let dataset = match resolve_dataset(&config.dataset) {
            Ok(d) => d,
            Err(e) => return set_core_error(e),
        };
        match train(&config, &dataset, Path::new(out_dir)) {
            Ok(_) => ProtovaeStatus::Ok,
            Err(e) => set_core_error(e),
        }
    })
}

// ---------------------------------------------------------------------------
// Trained models
// ---------------------------------------------------------------------------

/// Opaque encoder handle loaded from a checkpoint.
pub struct ProtovaeModel {
    rep: Box<dyn Representation>,
}

/// Load a checkpoint's posterior-mean encoder.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn protovae_model_load(
    path: *const c_char,
    out: *mut *mut ProtovaeModel,
) -> ProtovaeStatus {
    guarded(|| {
        if out.is_null() {
            return set_error(ProtovaeStatus::NullArgument, "out is NULL");
        }
        let path = match utf8_arg("path", path) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match representation_from_checkpoint(Path::new(path)) {
            Ok(rep) => {
                *out = Box::into_raw(Box::new(ProtovaeModel { rep }));
                ProtovaeStatus::Ok
            }
            Err(e) => set_core_error(e),
        }
    })
}

/// Latent width d of a loaded model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn protovae_model_latent_dim(
    model: *const ProtovaeModel,
    out: *mut u64,
) -> ProtovaeStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return set_error(ProtovaeStatus::NullArgument, "model or out is NULL");
        }
        *out = (*model).rep.width() as u64;
        ProtovaeStatus::Ok
    })
}

/// Encode dataset images to posterior-mean codes. `out` receives `n * d`
/// doubles in row-major order, where d is the model's latent width;
/// `out_len` must equal exactly that.
///
/// # Safety
/// `model` and `dataset` must be live handles; `indices` must point to
/// `n` readable u64s; `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn protovae_model_encode(
    model: *const ProtovaeModel,
    dataset: *const ProtovaeDataset,
    indices: *const u64,
    n: size_t,
    out: *mut f64,
    out_len: size_t,
) -> ProtovaeStatus {
    guarded(|| {
        if model.is_null() || dataset.is_null() || indices.is_null() || out.is_null() {
            return set_error(ProtovaeStatus::NullArgument, "a required pointer is NULL");
        }
        let model = &*model;
        let dataset = &(*dataset).inner;
        let d = model.rep.width();
        if out_len != n * d {
            return set_error(
                ProtovaeStatus::InvalidArgument,
                &format!("out_len {out_len} != n ({n}) * latent_dim ({d})"),
            );
        }
        let indices: Vec<usize> = std::slice::from_raw_parts(indices, n)
            .iter()
            .map(|&v| v as usize)
            .collect();
        if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
            return set_error(
                ProtovaeStatus::InvalidArgument,
                &format!("index {bad} out of range for dataset of {}", dataset.len()),
            );
        }
        match embed_indices(dataset, model.rep.as_ref(), &indices, 256) {
            Ok(codes) => {
                let flat = codes.as_standard_layout();
                let src = flat.as_slice().expect("standard layout");
                std::ptr::copy_nonoverlapping(src.as_ptr(), out, out_len);
                ProtovaeStatus::Ok
            }
            Err(e) => set_core_error(e),
        }
    })
}

/// Release a model handle. NULL is ignored.
///
/// # Safety
/// `model` must have come from [`protovae_model_load`] and not been freed
/// before.
#[no_mangle]
pub unsafe extern "C" fn protovae_model_free(model: *mut ProtovaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Number of doubles written by [`protovae_evaluate`].
pub const PROTOVAE_SCORE_COUNT: usize = 5;

/// Score a checkpoint with the full metric suite. `eval_config_toml` may
/// be NULL for defaults. `out_scores` receives exactly
/// [`PROTOVAE_SCORE_COUNT`] doubles in this order: FactorVAE score, MIG,
/// DCI disentanglement, DCI completeness, DCI informativeness.
///
/// # Safety
/// `checkpoint` must be a NUL-terminated string; `dataset` must be a live
/// handle; `out_scores` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn protovae_evaluate(
    checkpoint: *const c_char,
    dataset: *const ProtovaeDataset,
    eval_config_toml: *const c_char,
    out_scores: *mut f64,
    out_len: size_t,
) -> ProtovaeStatus {
    guarded(|| {
        if dataset.is_null() || out_scores.is_null() {
            return set_error(ProtovaeStatus::NullArgument, "dataset or out_scores is NULL");
        }
        let checkpoint = match utf8_arg("checkpoint", checkpoint) {
            Ok(s) => s,
            Err(status) => return status,
        };
        if out_len != PROTOVAE_SCORE_COUNT {
            return set_error(
                ProtovaeStatus::InvalidArgument,
                &format!("out_len {out_len} != {PROTOVAE_SCORE_COUNT}"),
            );
        }
        let config = if eval_config_toml.is_null() {
            EvalConfig::default()
        } else {
            let text = match utf8_arg("eval_config_toml", eval_config_toml) {
                Ok(s) => s,
                Err(status) => return status,
            };
            match toml::from_str(text) {
                Ok(c) => c,
                Err(e) => {
                    return set_error(
                        ProtovaeStatus::InvalidArgument,
                        &format!("eval config: {e}"),
                    )
                }
            }
        };
        match evaluate(Path::new(checkpoint), &(*dataset).inner, &config) {
            Ok(report) => {
                for (i, (_, v)) in report.scores().iter().enumerate() {
                    *out_scores.add(i) = *v;
                }
                ProtovaeStatus::Ok
            }
            Err(e) => set_core_error(e),
        }
    })
}
