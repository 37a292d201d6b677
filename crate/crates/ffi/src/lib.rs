//! C interface to the crowd-counting library.
//!
//! Every fallible function returns an [`SfaStatus`]; on failure a message
//! for the calling thread is available from [`sfa_last_error`]. Objects are
//! opaque handles created and destroyed by this library.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sfanet::checkpoint::{load_checkpoint, save_checkpoint};
use sfanet::data::{eval_prepare, Normalization};
use sfanet::eval::count_prepared;
use sfanet::groundtruth::{adaptive_kernel, render_density, KernelSpec, PointAnnotation};
use sfanet::imaging::Image;
use sfanet::model::{Model, ModelConfig};
use sfanet::{Error, Mode};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Checkpoint = 6,
    UninitializedStats = 7,
    Panic = 8,
}

/// A model instance.
pub struct SfaModel {
    model: Model<f32>,
}

/// Density and attention maps from one inference, `width × height` each.
pub struct SfaMaps {
    width: usize,
    height: usize,
    density: Vec<f32>,
    attention: Vec<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> SfaStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => SfaStatus::ShapeMismatch,
        Error::InvalidArgument(_) | Error::EmptyDataset | Error::NonFiniteGradient(_) => {
            SfaStatus::InvalidArgument
        }
        Error::UninitializedStats(_) => SfaStatus::UninitializedStats,
        Error::CheckpointShape { .. } | Error::CheckpointMissing(_) => SfaStatus::Checkpoint,
        Error::Io { .. } => SfaStatus::Io,
        Error::Format { .. } | Error::Image { .. } | Error::Json { .. } | Error::Config { .. } => {
            SfaStatus::Format
        }
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SfaStatus, String)>) -> SfaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SfaStatus::Panic
        }
    }
}

fn lib(e: Error) -> (SfaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SfaStatus, String) {
    (SfaStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (SfaStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (SfaStatus::InvalidArgument, "path is not UTF-8".into()))
}

/// Message describing the last failure on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sfa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sfa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized model.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_new(
    width_multiplier: f64,
    amp_enabled: bool,
    seed: u64,
    out: *mut *mut SfaModel,
) -> SfaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ModelConfig {
            width_multiplier,
            amp_enabled,
            init_seed: seed,
            ..Default::default()
        };
        let model = Model::new(config).map_err(lib)?;
        *out = Box::into_raw(Box::new(SfaModel { model }));
        Ok(())
    })
}

/// Destroys a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`sfa_model_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_free(model: *mut SfaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_param_count(model: *const SfaModel, out: *mut usize) -> SfaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.parameter_count();
        Ok(())
    })
}

/// Loads a checkpoint. With `strict` every tensor must match; otherwise
/// the overlap is loaded.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_load(
    model: *mut SfaModel,
    path: *const c_char,
    strict: bool,
) -> SfaStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        load_checkpoint(path, &mut m.model, strict).map_err(lib)?;
        Ok(())
    })
}

/// Writes the model parameters and statistics to `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_save(model: *const SfaModel, path: *const c_char) -> SfaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        save_checkpoint(&m.model, None, path).map_err(lib)
    })
}

/// Counts people in a planar RGB image (`3 × height × width` floats in
/// `[0,1]`). Writes the count to `count` and, when `maps` is not null, a
/// new maps handle covering the `ceil(width/2) × ceil(height/2)` output.
///
/// # Safety
/// `model` must be a live handle, `rgb` must hold `3·width·height` floats
/// and `count` must be writable; `maps` may be null.
#[no_mangle]
pub unsafe extern "C" fn sfa_model_infer(
    model: *mut SfaModel,
    rgb: *const f32,
    width: usize,
    height: usize,
    count: *mut f64,
    maps: *mut *mut SfaMaps,
) -> SfaStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if count.is_null() {
            return Err(null("count"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .filter(|&n| n > 0)
            .ok_or_else(|| (SfaStatus::InvalidArgument, format!("bad image size {width}x{height}")))?;
        let data = std::slice::from_raw_parts(rgb, n).to_vec();
        let image = Image::new(width, height, data).map_err(lib)?;
        let prep = eval_prepare::<f32>(&image, None, &Normalization::default()).map_err(lib)?;
        let out = m.model.predict(&prep.input, Mode::Eval).map_err(lib)?;
        *count = count_prepared(&out.density, &prep).map_err(lib)?;
        if !maps.is_null() {
            let window = |t: &sfanet::Tensor<f32>| {
                let w = t.shape()[3];
                (0..prep.out_height)
                    .flat_map(|y| t.data()[y * w..y * w + prep.out_width].iter().copied())
                    .collect::<Vec<f32>>()
            };
            *maps = Box::into_raw(Box::new(SfaMaps {
                width: prep.out_width,
                height: prep.out_height,
                density: window(&out.density),
                attention: window(&out.attention),
            }));
        }
        Ok(())
    })
}

/// Map width, or 0 for null.
///
/// # Safety
/// `maps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfa_maps_width(maps: *const SfaMaps) -> usize {
    maps.as_ref().map_or(0, |m| m.width)
}

/// Map height, or 0 for null.
///
/// # Safety
/// `maps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfa_maps_height(maps: *const SfaMaps) -> usize {
    maps.as_ref().map_or(0, |m| m.height)
}

/// Row-major density values, owned by `maps`.
///
/// # Safety
/// `maps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfa_maps_density(maps: *const SfaMaps) -> *const f32 {
    maps.as_ref().map_or(ptr::null(), |m| m.density.as_ptr())
}

/// Row-major attention values in (0,1), owned by `maps`.
///
/// # Safety
/// `maps` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sfa_maps_attention(maps: *const SfaMaps) -> *const f32 {
    maps.as_ref().map_or(ptr::null(), |m| m.attention.as_ptr())
}

/// Destroys a maps handle. Null is ignored.
///
/// # Safety
/// `maps` must come from [`sfa_model_infer`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sfa_maps_free(maps: *mut SfaMaps) {
    if !maps.is_null() {
        drop(Box::from_raw(maps));
    }
}

/// Kernel size and sigma for an image of the given width.
///
/// # Safety
/// `size` and `sigma` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfa_adaptive_kernel(width: usize, size: *mut usize, sigma: *mut f64) -> SfaStatus {
    guard(|| {
        if size.is_null() || sigma.is_null() {
            return Err(null("size/sigma"));
        }
        let k = adaptive_kernel(width);
        *size = k.size;
        *sigma = k.sigma;
        Ok(())
    })
}

/// Renders a density map for `n_points` head positions given as
/// interleaved `x, y` pairs into `out` (`width × height`, row-major).
///
/// # Safety
/// `points` must hold `2·n_points` doubles (may be null when `n_points` is
/// 0) and `out` must hold `width·height` floats.
#[no_mangle]
pub unsafe extern "C" fn sfa_render_density(
    points: *const f64,
    n_points: usize,
    width: usize,
    height: usize,
    kernel_size: usize,
    sigma: f64,
    out: *mut f32,
) -> SfaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if points.is_null() && n_points > 0 {
            return Err(null("points"));
        }
        let kernel = KernelSpec::new(kernel_size, sigma).map_err(lib)?;
        let coords = if n_points == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(points, 2 * n_points)
        };
        let mut ann = PointAnnotation::new("ffi", width, height);
        ann.points = coords.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        ann.clamp_points();
        let d = render_density(&ann, &kernel);
        let dst = std::slice::from_raw_parts_mut(out, width * height);
        for (o, v) in dst.iter_mut().zip(&d.values) {
            *o = *v as f32;
        }
        Ok(())
    })
}
