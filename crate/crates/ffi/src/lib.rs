//! C ABI over `switching-core`.
//!
//! Models live behind the opaque [`SwModel`] handle. Every fallible call
//! returns an [`SwStatus`]; on failure [`sw_last_error`] describes the cause
//! for the calling thread. Arrays are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use switching_core::io::{save_ground_truth, Checkpoint, CheckpointModel};
use switching_core::msm::{forward_backward, log_likelihood, Trajectory};
use switching_core::synthgen::{generate_dataset, GeneratorConfig};
use switching_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    InvalidModel = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    WrongModelKind = 9,
    Panic = 10,
}

/// Opaque model handle; an MSM or an SDS.
pub struct SwModel {
    inner: CheckpointModel,
}

/// Model dimensions. `obs_dim` is 0 for an MSM.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SwDims {
    pub num_regimes: usize,
    pub num_initial: usize,
    pub lag: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub is_sds: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SwStatus {
    match e {
        Error::Shape(_) | Error::SequenceTooShort { .. } => SwStatus::ShapeMismatch,
        Error::Io(_) => SwStatus::Io,
        Error::Format(_) | Error::Checksum { .. } | Error::Json(_) => SwStatus::Format,
        Error::InvalidModel(_) => SwStatus::InvalidModel,
        Error::Numeric(_) | Error::Diverged(_) | Error::RankDeficient(_) => SwStatus::Numeric,
        Error::Config(_) | Error::TooManyPaths { .. } => SwStatus::InvalidArgument,
    }
}

struct Fail(SwStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SwStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            SwStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SwStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(SwStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const SwModel) -> Result<&'a CheckpointModel, Fail> {
    p.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn trajectory_arg(data: *const f64, len: usize, dim: usize) -> Result<Trajectory, Fail> {
    if data.is_null() {
        return Err(null("data"));
    }
    if len == 0 || dim == 0 {
        return Err(Fail(SwStatus::InvalidArgument, "length and dimension must be positive".into()));
    }
    let n = len.checked_mul(dim).ok_or_else(|| Fail(SwStatus::InvalidArgument, "size overflow".into()))?;
    Ok(Trajectory::new(std::slice::from_raw_parts(data, n).to_vec(), dim)?)
}

unsafe fn write_out(src: &[f64], out: *mut f64, capacity: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if capacity < src.len() {
        return Err(Fail(SwStatus::BufferTooSmall, format!("need {} values, buffer holds {capacity}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Message for the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a JSON checkpoint file and validates it.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_model_load(path: *const c_char, out: *mut *mut SwModel) -> SwStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(SwModel { inner: ckpt.model }));
        Ok(())
    })
}

/// Parses checkpoint JSON text and validates it.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sw_model_from_json(json: *const c_char, out: *mut *mut SwModel) -> SwStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::from_json(json)?;
        *out = Box::into_raw(Box::new(SwModel { inner: ckpt.model }));
        Ok(())
    })
}

/// Serialises the model as checkpoint JSON. Free the string with [`sw_string_free`].
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_model_to_json(model: *const SwModel, out: *mut *mut c_char) -> SwStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::new(m.clone(), Default::default());
        let s = CString::new(ckpt.to_json()?).map_err(|e| Fail(SwStatus::Format, e.to_string()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_model_free(model: *mut SwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_model_dims(model: *const SwModel, out: *mut SwDims) -> SwStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = m.prior();
        *out = SwDims {
            num_regimes: p.num_regimes,
            num_initial: p.num_initial,
            lag: p.lag,
            latent_dim: p.dim,
            obs_dim: match m {
                CheckpointModel::Msm(_) => 0,
                CheckpointModel::Sds(s) => s.obs_dim(),
            },
            is_sds: matches!(m, CheckpointModel::Sds(_)),
        };
        Ok(())
    })
}

/// Exact log-likelihood of one latent trajectory (`len x dim`) under the
/// model's MSM prior.
///
/// # Safety
/// `data` must hold `len * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_msm_log_likelihood(
    model: *const SwModel,
    data: *const f64,
    len: usize,
    dim: usize,
    out: *mut f64,
) -> SwStatus {
    guard(|| {
        let m = model_arg(model)?;
        let z = trajectory_arg(data, len, dim)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = log_likelihood(m.prior(), &z)?;
        Ok(())
    })
}

/// Regime posteriors of one latent trajectory. Row `s` of `gamma` is time
/// `lag + s`; every row is padded to `num_regimes` columns, so the buffer needs
/// `(len - lag + 1) * num_regimes` doubles. Row 0 has `num_initial` valid
/// entries, the rest zero.
///
/// # Safety
/// `data` must hold `len * dim` doubles and `gamma` `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn sw_msm_posterior(
    model: *const SwModel,
    data: *const f64,
    len: usize,
    dim: usize,
    gamma: *mut f64,
    capacity: usize,
) -> SwStatus {
    guard(|| {
        let m = model_arg(model)?;
        let z = trajectory_arg(data, len, dim)?;
        let post = forward_backward(m.prior(), &z)?;
        let k = m.prior().num_regimes.max(m.prior().num_initial);
        let mut flat = vec![0.0; post.gamma.len() * k];
        for (row, g) in flat.chunks_mut(k).zip(&post.gamma) {
            row[..g.len()].copy_from_slice(g);
        }
        write_out(&flat, gamma, capacity)
    })
}

/// Encoder means for one observation trajectory (`len x obs_dim`); writes
/// `len * latent_dim` doubles.
///
/// # Safety
/// `data` must hold `len * dim` doubles and `out` `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn sw_sds_encode(
    model: *const SwModel,
    data: *const f64,
    len: usize,
    dim: usize,
    out: *mut f64,
    capacity: usize,
) -> SwStatus {
    guard(|| {
        let CheckpointModel::Sds(s) = model_arg(model)? else {
            return Err(Fail(SwStatus::WrongModelKind, "model is not an SDS".into()));
        };
        let x = trajectory_arg(data, len, dim)?;
        let z = s.encode_trajectory(&x)?;
        write_out(z.data(), out, capacity)
    })
}

/// Samples benchmark `setting` (`"A"`..`"F"`) into directory `out_dir`.
///
/// # Safety
/// `setting` and `out_dir` must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sw_generate(
    setting: *const c_char,
    seed: u64,
    num_train: usize,
    num_eval: usize,
    out_dir: *const c_char,
) -> SwStatus {
    guard(|| {
        let setting = str_arg(setting, "setting")?;
        let dir = str_arg(out_dir, "out_dir")?;
        let cfg = GeneratorConfig { seed, num_train, num_eval, ..GeneratorConfig::preset(setting)? };
        let gt = generate_dataset(&cfg)?;
        save_ground_truth(Path::new(dir), &gt)?;
        Ok(())
    })
}
