//! C ABI for the camixer change-detection pipeline.
//!
//! Conventions:
//! * Every fallible function returns a [`CamixerStatus`]; on failure a
//!   message is available from [`camixer_last_error`] on the same thread.
//! * Models are opaque handles created by `camixer_model_*` constructors and
//!   released with [`camixer_model_free`].
//! * Images are row-major `double` buffers of `height * width` values; masks
//!   are `uint8_t` buffers holding 0 or 1. The caller owns all buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use camixer::cli::{EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE};
use camixer::config::RunConfig;
use camixer::image::{Grid, ImagePair, Mask};
use camixer::model::CAMixerModel;
use camixer::speckle::{generate, SceneSpec};
use camixer::{metrics, pipeline, trainer, Error};

/// Result codes. The nonzero values match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamixerStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Bad argument or configuration.
    Usage = 2,
    /// Bad or inconsistent input data, or an I/O failure.
    Data = 3,
    /// Training or inference produced non-finite values.
    Numeric = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

/// Opaque trained model.
pub struct CamixerModel {
    inner: CAMixerModel,
}

/// Evaluation counts and scores.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CamixerMetrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub oe: u64,
    pub pcc: f64,
    pub kc: f64,
    /// Nonzero when kappa used the single-class convention.
    pub kc_degenerate: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> CamixerStatus {
    match camixer::cli::exit_code(err) {
        EXIT_USAGE => CamixerStatus::Usage,
        EXIT_NUMERIC => CamixerStatus::Numeric,
        EXIT_DATA => CamixerStatus::Data,
        _ => CamixerStatus::Data,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CamixerStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CamixerStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            CamixerStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            CamixerStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Failure> {
    Ok(std::slice::from_raw_parts(nonnull(p, what)?, n))
}

/// # Safety
/// `p` must be null or point to `n` writable values.
unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    nonnull(p as *const T, what)?;
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn area(height: usize, width: usize) -> Result<usize, Failure> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Lib(Error::InvalidArgument("image extent must be positive".into())))
}

/// # Safety
/// `t1` and `t2` must each point to `height * width` doubles.
unsafe fn pair_from(
    t1: *const f64,
    t2: *const f64,
    height: usize,
    width: usize,
) -> Result<ImagePair, Failure> {
    let n = area(height, width)?;
    let a = Grid::new(height, width, slice(t1, n, "t1")?.to_vec())?;
    let b = Grid::new(height, width, slice(t2, n, "t2")?.to_vec())?;
    Ok(ImagePair::new(a, b)?)
}

/// # Safety
/// `text` must be null or a nul-terminated string.
unsafe fn config_from(text: *const c_char) -> Result<RunConfig, Failure> {
    if text.is_null() {
        return Ok(RunConfig::default());
    }
    let s = CStr::from_ptr(text)
        .to_str()
        .map_err(|_| Failure::Lib(Error::Config("configuration text is not UTF-8".into())))?;
    let cfg = RunConfig::from_text(s)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn camixer_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn camixer_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model from a serialized buffer (the `model.camx` file contents).
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn camixer_model_load(
    bytes: *const u8,
    len: usize,
    out: *mut *mut CamixerModel,
) -> CamixerStatus {
    guard(|| {
        nonnull(out as *const _, "out")?;
        let model = CAMixerModel::load(slice(bytes, len, "bytes")?)?;
        *out = Box::into_raw(Box::new(CamixerModel { inner: model }));
        Ok(())
    })
}

/// Serialized size of `model` in bytes.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn camixer_model_saved_len(model: *const CamixerModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.save().len())
}

/// Serializes `model` into `buf`, which must hold
/// [`camixer_model_saved_len`] bytes.
///
/// # Safety
/// `model` must be a live handle; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn camixer_model_save(
    model: *const CamixerModel,
    buf: *mut u8,
    len: usize,
) -> CamixerStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let bytes = m.inner.save();
        if len < bytes.len() {
            return Err(
                Error::InvalidArgument(format!("buffer holds {len} bytes, need {}", bytes.len())).into()
            );
        }
        slice_mut(buf, bytes.len(), "buf")?.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn camixer_model_free(model: *mut CamixerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn camixer_model_param_count(model: *const CamixerModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// Renders the synthetic scene into caller buffers of `height * width`.
///
/// # Safety
/// `t1`, `t2` and `truth` must each point to `height * width` writable values.
#[no_mangle]
pub unsafe extern "C" fn camixer_generate_scene(
    height: usize,
    width: usize,
    change_gain: f64,
    looks: u32,
    seed: u64,
    t1: *mut f64,
    t2: *mut f64,
    truth: *mut u8,
) -> CamixerStatus {
    guard(|| {
        let n = area(height, width)?;
        let spec = SceneSpec { height, width, change_gain, looks, seed };
        let (pair, mask) = generate(&spec.build())?;
        slice_mut(t1, n, "t1")?.copy_from_slice(&pair.t1.data);
        slice_mut(t2, n, "t2")?.copy_from_slice(&pair.t2.data);
        slice_mut(truth, n, "truth")?.copy_from_slice(&mask.data);
        Ok(())
    })
}

/// Preclassifies the pair and trains a model on it. `config` is optional
/// `key = value` text (null for defaults).
///
/// # Safety
/// `t1` and `t2` must each point to `height * width` doubles; `config` must be
/// null or nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn camixer_train(
    t1: *const f64,
    t2: *const f64,
    height: usize,
    width: usize,
    config: *const c_char,
    out: *mut *mut CamixerModel,
) -> CamixerStatus {
    guard(|| {
        nonnull(out as *const _, "out")?;
        let cfg = config_from(config)?;
        let pair = pair_from(t1, t2, height, width)?;
        let pre = pipeline::preclassify_pair(&pair, &cfg)?;
        let trained = trainer::train(&pre.samples, &cfg.train_config())?;
        *out = Box::into_raw(Box::new(CamixerModel { inner: trained.model }));
        Ok(())
    })
}

/// Classifies every pixel of the pair into `mask` (0 unchanged, 1 changed).
/// `tile` is the inference batch size; 0 selects the default.
///
/// # Safety
/// `model` must be a live handle; `t1`, `t2` must point to `height * width`
/// doubles and `mask` to `height * width` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn camixer_predict(
    model: *const CamixerModel,
    t1: *const f64,
    t2: *const f64,
    height: usize,
    width: usize,
    tile: usize,
    mask: *mut u8,
) -> CamixerStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let pair = pair_from(t1, t2, height, width)?;
        let tile = if tile == 0 { trainer::DEFAULT_TILE } else { tile };
        let map = trainer::predict_map(&m.inner, &pair, tile)?;
        slice_mut(mask, pair.t1.len(), "mask")?.copy_from_slice(&map.decisions.data);
        Ok(())
    })
}

/// Scores a predicted mask against ground truth.
///
/// # Safety
/// `pred` and `truth` must point to `height * width` bytes; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn camixer_evaluate(
    pred: *const u8,
    truth: *const u8,
    height: usize,
    width: usize,
    out: *mut CamixerMetrics,
) -> CamixerStatus {
    guard(|| {
        nonnull(out as *const _, "out")?;
        let n = area(height, width)?;
        let p = Mask::new(height, width, slice(pred, n, "pred")?.to_vec())?;
        let t = Mask::new(height, width, slice(truth, n, "truth")?.to_vec())?;
        let r = metrics::evaluate(&p, &t)?;
        *out = CamixerMetrics {
            tp: r.tp,
            tn: r.tn,
            fp: r.fp,
            fn_: r.fn_,
            oe: r.oe,
            pcc: r.pcc,
            kc: r.kc,
            kc_degenerate: r.kc_degenerate as u8,
        };
        Ok(())
    })
}
