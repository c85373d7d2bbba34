//! C ABI over the convprune core.
//!
//! Models are exposed as opaque `CpModel` handles. Every fallible function
//! returns a [`CpStatus`]; on failure a description is available from
//! [`cp_last_error_message`] on the same thread. Output pointers are written
//! only on success.

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use convprune::pooling::{self, PoolingConfig, PoolingKind};
use convprune::pruner::apply_pruning;
use convprune::retrieval::{average_precision, similarity_values, SimilarityMode};
use convprune::salience::salience_h1;
use convprune::{init_network, ArchitectureSpec, Error, NetworkModel, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Integrity = 5,
    Version = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpPooling {
    Sqp = 0,
    Rmac = 1,
}

/// Opaque model handle.
pub struct CpModel {
    inner: NetworkModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CpStatus {
    match e {
        Error::Shape(_) | Error::Architecture { .. } => CpStatus::ShapeMismatch,
        Error::Io(_) => CpStatus::Io,
        Error::Integrity(_) | Error::MaskViolation { .. } | Error::Json(_) => CpStatus::Integrity,
        Error::Version { .. } => CpStatus::Version,
        _ => CpStatus::InvalidArgument,
    }
}

fn fail(status: CpStatus, msg: impl Into<String>) -> CpStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), CpStatus>) -> CpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CpStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(CpStatus::Internal, "internal panic"),
    }
}

fn check(r: convprune::Result<()>) -> Result<(), CpStatus> {
    lift(r)
}

fn lift<T>(r: convprune::Result<T>) -> Result<T, CpStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), CpStatus> {
    if p.is_null() {
        Err(fail(CpStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, CpStatus> {
    non_null(p, "path")?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CpStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn model_ref<'a>(m: *const CpModel) -> Result<&'a NetworkModel, CpStatus> {
    non_null(m, "model")?;
    Ok(&(*m).inner)
}

fn into_handle(model: NetworkModel) -> *mut CpModel {
    Box::into_raw(Box::new(CpModel { inner: model }))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// He-initialized tinynet (3x32x32 input, 64x4x4 features).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn cp_model_init_tinynet(seed: u64, out: *mut *mut CpModel) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        let model = lift(init_network(&ArchitectureSpec::tinynet(), seed))?;
        *out = into_handle(model);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_model_load(path: *const c_char, out: *mut *mut CpModel) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = path_arg(path)?;
        let model = lift(NetworkModel::load(path))?;
        *out = into_handle(model);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cp_model_save(model: *const CpModel, path: *const c_char) -> CpStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = path_arg(path)?;
        check(m.save(path))
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cp_model_free(model: *mut CpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes `[C, H, W]` of the expected input image.
///
/// # Safety
/// `out` must point to three writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn cp_model_input_shape(model: *const CpModel, out: *mut usize) -> CpStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        ptr::copy_nonoverlapping(m.input_shape().as_ptr(), out, 3);
        Ok(())
    })
}

/// Writes `[C, H, W]` of the final feature map; C is the descriptor length.
///
/// # Safety
/// `out` must point to three writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn cp_model_feature_shape(model: *const CpModel, out: *mut usize) -> CpStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        ptr::copy_nonoverlapping(m.output_shape().as_ptr(), out, 3);
        Ok(())
    })
}

/// Total and unmasked conv weight counts.
///
/// # Safety
/// `total` and `remaining` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_model_weight_counts(
    model: *const CpModel,
    total: *mut usize,
    remaining: *mut usize,
) -> CpStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(total, "total")?;
        non_null(remaining, "remaining")?;
        *total = m.conv_weight_count();
        *remaining = m.unmasked_weight_count();
        Ok(())
    })
}

/// Magnitude-prunes a copy of `model` to keep fraction `keep` and returns
/// it as a new handle. `achieved_keep` may be null.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_model_prune_h1(
    model: *const CpModel,
    keep: f64,
    out: *mut *mut CpModel,
    achieved_keep: *mut f64,
) -> CpStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(out, "out")?;
        let (pruned, report) = lift(apply_pruning(m, &salience_h1(m), keep))?;
        if !achieved_keep.is_null() {
            *achieved_keep = report.achieved_keep;
        }
        *out = into_handle(pruned);
        Ok(())
    })
}

/// Global descriptor of one image (`C*H*W` values, channel-major) written to
/// `out`, which holds `out_len` values. `levels` is ignored for SQP.
/// `written` receives the descriptor length, also when `out` is too small.
///
/// # Safety
/// `image` must hold `image_len` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn cp_model_descriptor(
    model: *const CpModel,
    image: *const f64,
    image_len: usize,
    pooling: CpPooling,
    levels: usize,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> CpStatus {
    guard(|| {
        let m = model_ref(model)?;
        non_null(image, "image")?;
        non_null(out, "out")?;
        non_null(written, "written")?;
        let shape = m.input_shape();
        if image_len != shape.iter().product::<usize>() {
            return Err(fail(
                CpStatus::ShapeMismatch,
                format!("image has {image_len} values, model expects {shape:?}"),
            ));
        }
        let data = std::slice::from_raw_parts(image, image_len).to_vec();
        let tensor = lift(Tensor::new(shape.to_vec(), data))?;
        let config = PoolingConfig {
            kind: match pooling {
                CpPooling::Sqp => PoolingKind::Sqp,
                CpPooling::Rmac => PoolingKind::Rmac,
            },
            levels,
        };
        let features = lift(m.forward_features(&tensor))?;
        let desc = lift(pooling::pool(&features, &config))?;
        *written = desc.len();
        if out_len < desc.len() {
            return Err(fail(
                CpStatus::BufferTooSmall,
                format!("descriptor needs {} values, buffer holds {out_len}", desc.len()),
            ));
        }
        ptr::copy_nonoverlapping(desc.values.as_ptr(), out, desc.len());
        Ok(())
    })
}

/// Cosine similarity of two descriptors of length `len` (0 if either is
/// all zeros).
///
/// # Safety
/// `a` and `b` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cp_similarity(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> CpStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        if len == 0 {
            return Err(fail(CpStatus::InvalidArgument, "descriptors are empty"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, len), std::slice::from_raw_parts(b, len));
        *out = similarity_values(a, b, SimilarityMode::Cosine);
        Ok(())
    })
}

/// Average precision of a ranked id list against a relevant id set.
///
/// # Safety
/// `ranking` must hold `ranking_len` ids and `relevant` `relevant_len` ids.
#[no_mangle]
pub unsafe extern "C" fn cp_average_precision(
    ranking: *const u32,
    ranking_len: usize,
    relevant: *const u32,
    relevant_len: usize,
    out: *mut f64,
) -> CpStatus {
    guard(|| {
        non_null(out, "out")?;
        if relevant_len == 0 || relevant.is_null() {
            return Err(fail(CpStatus::InvalidArgument, "relevant set is empty"));
        }
        let ranking = if ranking_len == 0 {
            &[][..]
        } else {
            non_null(ranking, "ranking")?;
            std::slice::from_raw_parts(ranking, ranking_len)
        };
        let relevant: HashSet<u32> = std::slice::from_raw_parts(relevant, relevant_len).iter().copied().collect();
        *out = lift(average_precision(ranking, &relevant))?;
        Ok(())
    })
}
