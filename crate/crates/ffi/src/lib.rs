//! C ABI over `revit`: load trained checkpoints, classify at a fixed token
//! length, route images through the assigner, and count FLOPs.
//!
//! Every function returns a [`RevitStatus`]; on failure a message for the
//! calling thread is available from [`revit_last_error`]. Handles are opaque
//! and must be released with the matching `*_free` function. Image buffers
//! are `batch × channels × size × size` floats, channel-major per image.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use revit::adaptive::{adaptive_predict_images, ModelRef, TlaRef};
use revit::assigner::{Tla, TlaConfig};
use revit::io::load_checkpoint;
use revit::model::{count_flops, ReViT, ReViTConfig};
use revit::numerics::{ParamStore, Tensor};
use revit::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RevitStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument or input failed validation.
    InvalidArgument = 2,
    /// A file could not be read.
    Io = 3,
    /// A file was readable but malformed.
    Format = 4,
    /// Checkpoint contents disagree with its manifest.
    CorruptCheckpoint = 5,
    /// Buffer or tensor extents do not match.
    Dimension = 6,
    /// An index (such as a length index) is out of range.
    Index = 7,
    /// An unexpected internal failure; the library caught a panic.
    Internal = 8,
}

/// A trained resizable ViT.
pub struct RevitModel {
    model: ReViT,
    store: ParamStore<f32>,
}

/// A trained token-length assigner.
pub struct RevitTla {
    tla: Tla,
    store: ParamStore<f32>,
}

/// Image geometry and output sizes of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RevitModelInfo {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub num_lengths: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> RevitStatus {
    match err {
        Error::Dimension { .. } => RevitStatus::Dimension,
        Error::Index { .. } => RevitStatus::Index,
        Error::Io { .. } => RevitStatus::Io,
        Error::Format { .. } | Error::Json { .. } => RevitStatus::Format,
        Error::CorruptCheckpoint { .. } => RevitStatus::CorruptCheckpoint,
        Error::Parameter(_) | Error::Usage(_) | Error::Validation(_) | Error::Consistency(_) => {
            RevitStatus::InvalidArgument
        }
    }
}

struct Failure(RevitStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RevitStatus::NullArgument, format!("`{what}` is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(RevitStatus::InvalidArgument, message.into())
}

/// Runs `body`, records any failure and converts it to a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> RevitStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => RevitStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RevitStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Copies `batch` images of the given geometry into a tensor.
unsafe fn images_arg(images: *const f32, batch: usize, channels: usize, size: usize) -> Result<Tensor<f32>, Failure> {
    if images.is_null() {
        return Err(null("images"));
    }
    if batch == 0 {
        return Err(invalid("batch must be >= 1"));
    }
    let n = batch * channels * size * size;
    let data = std::slice::from_raw_parts(images, n).to_vec();
    Ok(Tensor::from_vec(&[batch, channels, size, size], data)?)
}

fn meta_config<C: serde::de::DeserializeOwned>(meta: Option<serde_json::Value>, path: &Path) -> Result<C, Failure> {
    let meta = meta.ok_or_else(|| {
        Failure(
            RevitStatus::Format,
            format!("{} carries no architecture metadata", path.display()),
        )
    })?;
    serde_json::from_value(meta).map_err(|e| {
        Failure(
            RevitStatus::Format,
            format!("{}: architecture metadata: {e}", path.display()),
        )
    })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn revit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn revit_status_name(status: RevitStatus) -> *const c_char {
    let s: &'static CStr = match status {
        RevitStatus::Ok => c"ok",
        RevitStatus::NullArgument => c"null argument",
        RevitStatus::InvalidArgument => c"invalid argument",
        RevitStatus::Io => c"io error",
        RevitStatus::Format => c"format error",
        RevitStatus::CorruptCheckpoint => c"corrupt checkpoint",
        RevitStatus::Dimension => c"dimension mismatch",
        RevitStatus::Index => c"index out of range",
        RevitStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

/// Loads a model checkpoint written by `revit train-revit`. The
/// architecture is read from the checkpoint's metadata.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn revit_model_load(path: *const c_char, out: *mut *mut RevitModel) -> RevitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let (store, meta) = load_checkpoint::<f32>(path)?;
        let config: ReViTConfig = meta_config(meta, path)?;
        let model = ReViT::new(config)?;
        model.check_store(&store)?;
        *out = Box::into_raw(Box::new(RevitModel { model, store }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`revit_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn revit_model_free(model: *mut RevitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn revit_model_info(model: *const RevitModel, out: *mut RevitModelInfo) -> RevitStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = m.model.config();
        *out = RevitModelInfo {
            image_size: c.image_size,
            channels: c.channels,
            num_classes: c.num_classes,
            num_lengths: m.model.num_lengths(),
        };
        Ok(())
    })
}

/// Class logits at one token length, `batch × num_classes` floats into
/// `out_logits`, whose capacity `out_len` must be at least that.
///
/// # Safety
/// `images` must hold `batch` images and `out_logits` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn revit_model_logits(
    model: *const RevitModel,
    images: *const f32,
    batch: usize,
    length_idx: usize,
    out_logits: *mut f32,
    out_len: usize,
) -> RevitStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = m.model.config();
        let x = images_arg(images, batch, c.channels, c.image_size)?;
        let need = batch * c.num_classes;
        if out_len < need {
            return Err(Failure(
                RevitStatus::Dimension,
                format!("out_logits holds {out_len} floats, {need} needed"),
            ));
        }
        let out = out_slice(out_logits, need, "out_logits")?;
        let logits = m.model.class_logits(&m.store, &x, length_idx)?;
        out.copy_from_slice(logits.data());
        Ok(())
    })
}

/// Predicted class of each image at one token length.
///
/// # Safety
/// `images` must hold `batch` images and `out_classes` `batch` entries.
#[no_mangle]
pub unsafe extern "C" fn revit_model_predict(
    model: *const RevitModel,
    images: *const f32,
    batch: usize,
    length_idx: usize,
    out_classes: *mut usize,
) -> RevitStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let c = m.model.config();
        let x = images_arg(images, batch, c.channels, c.image_size)?;
        let out = out_slice(out_classes, batch, "out_classes")?;
        out.copy_from_slice(&m.model.predict(&m.store, &x, length_idx)?);
        Ok(())
    })
}

/// Analytic inference FLOPs of one image at `length_idx`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn revit_model_count_flops(
    model: *const RevitModel,
    length_idx: usize,
    out: *mut u64,
) -> RevitStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = count_flops(m.model.config(), length_idx, false)?;
        Ok(())
    })
}

/// Loads an assigner checkpoint written by `revit train-tla`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn revit_tla_load(path: *const c_char, out: *mut *mut RevitTla) -> RevitStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let (store, meta) = load_checkpoint::<f32>(path)?;
        let config: TlaConfig = meta_config(meta, path)?;
        let tla = Tla::new(config)?;
        tla.check_store(&store)?;
        *out = Box::into_raw(Box::new(RevitTla { tla, store }));
        Ok(())
    })
}

/// Releases an assigner; null is ignored.
///
/// # Safety
/// `tla` must come from [`revit_tla_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn revit_tla_free(tla: *mut RevitTla) {
    if !tla.is_null() {
        drop(Box::from_raw(tla));
    }
}

/// Token-length index chosen for each image.
///
/// # Safety
/// `images` must hold `batch` images and `out_lengths` `batch` entries.
#[no_mangle]
pub unsafe extern "C" fn revit_tla_assign(
    tla: *const RevitTla,
    images: *const f32,
    batch: usize,
    out_lengths: *mut usize,
) -> RevitStatus {
    guard(|| {
        let t = handle(tla, "tla")?;
        let c = t.tla.config();
        let x = images_arg(images, batch, c.channels, c.image_size)?;
        let out = out_slice(out_lengths, batch, "out_lengths")?;
        out.copy_from_slice(&t.tla.assign_batch(&t.store, &x)?);
        Ok(())
    })
}

/// Analytic FLOPs of one assigner forward.
///
/// # Safety
/// `tla` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn revit_tla_count_flops(tla: *const RevitTla, out: *mut u64) -> RevitStatus {
    guard(|| {
        let t = handle(tla, "tla")?;
        *out.as_mut().ok_or_else(|| null("out"))? = t.tla.flops();
        Ok(())
    })
}

/// Assigns each image a length, then classifies it at that length. Each
/// output array receives `batch` entries; `out_flops` is the per-image cost
/// including the assigner.
///
/// # Safety
/// `images` must hold `batch` images; every output must hold `batch` entries.
#[no_mangle]
pub unsafe extern "C" fn revit_adaptive_predict(
    model: *const RevitModel,
    tla: *const RevitTla,
    images: *const f32,
    batch: usize,
    out_classes: *mut usize,
    out_lengths: *mut usize,
    out_flops: *mut u64,
) -> RevitStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let t = handle(tla, "tla")?;
        let c = m.model.config();
        let x = images_arg(images, batch, c.channels, c.image_size)?;
        let classes = out_slice(out_classes, batch, "out_classes")?;
        let lengths = out_slice(out_lengths, batch, "out_lengths")?;
        let flops = out_slice(out_flops, batch, "out_flops")?;
        let vit = ModelRef {
            model: &m.model,
            store: &m.store,
        };
        let assigner = TlaRef {
            tla: &t.tla,
            store: &t.store,
        };
        for (s, p) in adaptive_predict_images(vit, assigner, &x)?.into_iter().enumerate() {
            classes[s] = p.class_idx;
            lengths[s] = p.length_idx;
            flops[s] = p.flops;
        }
        Ok(())
    })
}
