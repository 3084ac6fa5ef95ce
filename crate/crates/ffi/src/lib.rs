//! C ABI over `edkd`.
//!
//! Models and caches are opaque handles owned by the caller and released with
//! the matching `_free`. Every fallible call returns an [`EdkdStatus`]; on
//! failure the message is available from [`edkd_last_error`] on the same
//! thread until the next failing call. Panics never cross the boundary.
//!
//! Arrays are row-major `float` buffers. Images are `B × H × W × 3`,
//! standardized the same way the trainer feeds them.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use edkd::embed_cache::{load_cache, save_cache};
use edkd::losses::{clip_loss, cross_entropy_rows, kl_distill_loss, TargetMatrix};
use edkd::model::{load_checkpoint, save_checkpoint};
use edkd::{EmbeddingCache, Error, ModelConfig, ModelWeights};
use ndarray::{ArrayView2, ArrayView4};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdkdStatus {
    Ok = 0,
    Config = 1,
    Data = 2,
    Stale = 3,
    NumericAbort = 4,
    Shape = 5,
    Validation = 6,
    Format = 7,
    Io = 8,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 9,
    /// An internal panic was caught.
    Internal = 10,
}

impl From<&Error> for EdkdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => EdkdStatus::Config,
            Error::Shape(_) => EdkdStatus::Shape,
            Error::Validation(_) => EdkdStatus::Validation,
            Error::Data(_) => EdkdStatus::Data,
            Error::Format { .. } => EdkdStatus::Format,
            Error::Stale(_) => EdkdStatus::Stale,
            Error::NumericAbort { .. } => EdkdStatus::NumericAbort,
            Error::Io { .. } => EdkdStatus::Io,
        }
    }
}

/// Opaque student or teacher model.
pub struct EdkdModel {
    weights: ModelWeights<f32>,
}

/// Opaque class-embedding table.
pub struct EdkdCache {
    cache: EmbeddingCache,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(EdkdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(EdkdStatus::from(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(EdkdStatus::InvalidArgument, msg.to_owned())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EdkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdkdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EdkdStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

fn view2<'a>(data: &'a [f32], rows: usize, cols: usize) -> Result<ArrayView2<'a, f32>, Fail> {
    ArrayView2::from_shape((rows, cols), data).map_err(|e| Fail(EdkdStatus::Shape, e.to_string()))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn edkd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Freshly initialized model (truncated-normal weights from `seed`).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn edkd_model_init(
    layers: usize,
    embed_dim: usize,
    heads: usize,
    mlp_dim: usize,
    patch_size: usize,
    image_size: usize,
    num_classes: usize,
    seed: u64,
    out: *mut *mut EdkdModel,
) -> EdkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = ModelConfig::new(layers, embed_dim, heads, mlp_dim, patch_size, image_size, num_classes);
        let weights = ModelWeights::init(&cfg, seed)?;
        *out = Box::into_raw(Box::new(EdkdModel { weights }));
        Ok(())
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn edkd_model_load(path: *const c_char, out: *mut *mut EdkdModel) -> EdkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let weights = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(EdkdModel { weights }));
        Ok(())
    })
}

/// Writes a checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn edkd_model_save(model: *const EdkdModel, path: *const c_char) -> EdkdStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        save_checkpoint(&model.weights, path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edkd_model_free(model: *mut EdkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input image side, CLS embedding width and class count. Any out pointer may
/// be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn edkd_model_dims(
    model: *const EdkdModel,
    image_size: *mut usize,
    embed_dim: *mut usize,
    num_classes: *mut usize,
) -> EdkdStatus {
    guard(|| {
        let cfg = model.as_ref().ok_or_else(|| invalid("model is null"))?.weights.config;
        for (p, v) in [(image_size, cfg.image_size), (embed_dim, cfg.embed_dim), (num_classes, cfg.num_classes)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Forward pass on `batch` images. Writes `batch × embed_dim` CLS embeddings
/// and `batch × num_classes` logits; either output may be null.
///
/// # Safety
/// `images` must hold `batch·S·S·3` floats; non-null outputs must have room
/// for their full result.
#[no_mangle]
pub unsafe extern "C" fn edkd_model_forward(
    model: *const EdkdModel,
    images: *const f32,
    batch: usize,
    embeddings_out: *mut f32,
    logits_out: *mut f32,
) -> EdkdStatus {
    guard(|| {
        let w = &model.as_ref().ok_or_else(|| invalid("model is null"))?.weights;
        let s = w.config.image_size;
        let data = slice_arg(images, batch * s * s * 3, "images")?;
        let view = ArrayView4::from_shape((batch, s, s, 3), data).map_err(|e| Fail(EdkdStatus::Shape, e.to_string()))?;
        let out = w.forward(view)?;
        if !embeddings_out.is_null() {
            let dst = slice_mut_arg(embeddings_out, out.cls_embedding.len(), "embeddings_out")?;
            dst.iter_mut().zip(out.cls_embedding.iter()).for_each(|(d, &v)| *d = v);
        }
        if !logits_out.is_null() {
            let dst = slice_mut_arg(logits_out, out.logits.len(), "logits_out")?;
            dst.iter_mut().zip(out.logits.iter()).for_each(|(d, &v)| *d = v);
        }
        Ok(())
    })
}

/// Loads an embedding cache (format checks only; no digest verification).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn edkd_cache_load(path: *const c_char, out: *mut *mut EdkdCache) -> EdkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cache = load_cache(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(EdkdCache { cache }));
        Ok(())
    })
}

/// Writes a cache back to disk.
///
/// # Safety
/// `cache` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn edkd_cache_save(cache: *const EdkdCache, path: *const c_char) -> EdkdStatus {
    guard(|| {
        let c = cache.as_ref().ok_or_else(|| invalid("cache is null"))?;
        save_cache(&c.cache, path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a cache. Null is ignored.
///
/// # Safety
/// `cache` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edkd_cache_free(cache: *mut EdkdCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Class count and teacher embedding width.
///
/// # Safety
/// `cache` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn edkd_cache_dims(
    cache: *const EdkdCache,
    num_classes: *mut usize,
    embed_dim: *mut usize,
) -> EdkdStatus {
    guard(|| {
        let c = &cache.as_ref().ok_or_else(|| invalid("cache is null"))?.cache;
        if let Some(p) = num_classes.as_mut() {
            *p = c.num_classes();
        }
        if let Some(p) = embed_dim.as_mut() {
            *p = c.embed_dim();
        }
        Ok(())
    })
}

/// Copies the `num_classes × embed_dim` table into `out` (`len` floats).
///
/// # Safety
/// `cache` must be a live handle and `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn edkd_cache_table(cache: *const EdkdCache, out: *mut f32, len: usize) -> EdkdStatus {
    guard(|| {
        let c = &cache.as_ref().ok_or_else(|| invalid("cache is null"))?.cache;
        if len != c.table.len() {
            return Err(Fail(
                EdkdStatus::Shape,
                format!("table has {} values, buffer {len}", c.table.len()),
            ));
        }
        let dst = slice_mut_arg(out, len, "out")?;
        dst.iter_mut().zip(c.table.iter()).for_each(|(d, &v)| *d = v);
        Ok(())
    })
}

/// Row-wise cross entropy of `rows × cols` logits against one target column
/// per row.
///
/// # Safety
/// `logits` must hold `rows·cols` floats, `targets` `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn edkd_cross_entropy(
    logits: *const f32,
    rows: usize,
    cols: usize,
    targets: *const u32,
    out: *mut f32,
) -> EdkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let z = view2(slice_arg(logits, rows * cols, "logits")?, rows, cols)?;
        let labels: Vec<usize> = slice_arg(targets, rows, "targets")?.iter().map(|&t| t as usize).collect();
        *out = cross_entropy_rows(z, &TargetMatrix::one_hot(&labels, cols)?)?;
        Ok(())
    })
}

/// Contrastive loss of `b × d` student embeddings against `m × d` projected
/// teacher embeddings. `targets` gives each row's positive column; null means
/// the identity (requires `m == b`).
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn edkd_clip_loss(
    e_s: *const f32,
    b: usize,
    e_t_hat: *const f32,
    m: usize,
    d: usize,
    targets: *const u32,
    eps: f64,
    out: *mut f32,
) -> EdkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = view2(slice_arg(e_s, b * d, "e_s")?, b, d)?;
        let t = view2(slice_arg(e_t_hat, m * d, "e_t_hat")?, m, d)?;
        let g = if targets.is_null() {
            if m != b {
                return Err(Fail(EdkdStatus::Shape, format!("identity targets need m == b, got {m} vs {b}")));
            }
            TargetMatrix::identity(b)
        } else {
            let labels: Vec<usize> = slice_arg(targets, b, "targets")?.iter().map(|&t| t as usize).collect();
            TargetMatrix::one_hot(&labels, m)?
        };
        *out = clip_loss(s, t, &g, eps)?;
        Ok(())
    })
}

/// `T² · mean KL(softmax(z_t/T) ‖ softmax(z_s/T))` over `rows × cols` logits.
///
/// # Safety
/// Both logit buffers must hold `rows·cols` floats.
#[no_mangle]
pub unsafe extern "C" fn edkd_kl_distill_loss(
    z_s: *const f32,
    z_t: *const f32,
    rows: usize,
    cols: usize,
    temperature: f64,
    out: *mut f32,
) -> EdkdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let s = view2(slice_arg(z_s, rows * cols, "z_s")?, rows, cols)?;
        let t = view2(slice_arg(z_t, rows * cols, "z_t")?, rows, cols)?;
        *out = kl_distill_loss(s, t, temperature)?;
        Ok(())
    })
}

/// Cosine-annealed learning rate at `step` of `total_steps`.
#[no_mangle]
pub extern "C" fn edkd_cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    edkd::optim::cosine_lr(step, total_steps, base_lr)
}
