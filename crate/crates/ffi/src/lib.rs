//! C ABI over the emoe engine.
//!
//! Every function returns an [`EmoeStatus`]; on failure a message is kept
//! per thread and can be copied out with [`emoe_last_error`]. Bundles are
//! opaque handles created by [`emoe_bundle_load`] and released with
//! [`emoe_bundle_free`]. Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use emoe_core::cli::commands::{cmd_train, load_bundle};
use emoe_core::cli::RunConfig;
use emoe_core::engine::{ExpertBundle, LatentSpace, UncertaintyEstimate};
use emoe_core::text::{Prompt, ENGLISH};
use emoe_core::EmoeError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Checkpoint = 5,
    Crc = 6,
    Io = 7,
    Degenerate = 8,
    BufferTooSmall = 9,
    Internal = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmoeSpace {
    MidPost = 0,
    MidPre = 1,
    ZNext = 2,
}

impl From<EmoeSpace> for LatentSpace {
    fn from(s: EmoeSpace) -> Self {
        match s {
            EmoeSpace::MidPost => LatentSpace::MidPost,
            EmoeSpace::MidPre => LatentSpace::MidPre,
            EmoeSpace::ZNext => LatentSpace::ZNext,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmoeEstimate {
    pub eu: f64,
    pub reported: f64,
    pub d_mid: u32,
}

impl From<UncertaintyEstimate> for EmoeEstimate {
    fn from(e: UncertaintyEstimate) -> Self {
        Self {
            eu: e.eu,
            reported: e.reported,
            d_mid: e.d_mid as u32,
        }
    }
}

/// Opaque handle to a loaded expert bundle.
pub struct EmoeBundle {
    inner: ExpertBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EmoeStatus, String);

impl From<EmoeError> for Failure {
    fn from(e: EmoeError) -> Self {
        let status = match &e {
            EmoeError::Config(_) | EmoeError::Json(_) => EmoeStatus::Config,
            EmoeError::Checkpoint { .. } => EmoeStatus::Checkpoint,
            EmoeError::Crc { .. } => EmoeStatus::Crc,
            EmoeError::Io(_) | EmoeError::Csv(_) => EmoeStatus::Io,
            EmoeError::DegenerateEnsemble => EmoeStatus::Degenerate,
            EmoeError::UnparseablePrompt(_)
            | EmoeError::Empty(_)
            | EmoeError::InvalidArgument(_)
            | EmoeError::Dimension(_)
            | EmoeError::TimestepRange { .. } => EmoeStatus::InvalidArgument,
            _ => EmoeStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, records any failure and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmoeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside emoe".into());
            EmoeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(EmoeStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EmoeStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn config_arg(config_json: *const c_char, checkpoint_dir: *const c_char) -> Result<RunConfig, Failure> {
    let mut cfg = match opt_str_arg(config_json, "config_json")? {
        Some(text) => serde_json::from_str::<RunConfig>(text).map_err(|e| Failure(EmoeStatus::Config, e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(dir) = opt_str_arg(checkpoint_dir, "checkpoint_dir")? {
        cfg.checkpoint_dir = Some(PathBuf::from(dir));
    }
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn bundle_arg<'a>(b: *const EmoeBundle) -> Result<&'a ExpertBundle, Failure> {
    b.as_ref()
        .map(|b| &b.inner)
        .ok_or_else(|| Failure(EmoeStatus::NullPointer, "bundle is null".into()))
}

unsafe fn prompt_arg(text: *const c_char, language_tag: *const c_char) -> Result<Prompt, Failure> {
    let text = str_arg(text, "prompt")?;
    let tag = opt_str_arg(language_tag, "language_tag")?.unwrap_or(ENGLISH);
    Ok(Prompt::new(text, tag)?)
}

/// Trains a bundle and writes its checkpoints.
///
/// # Safety
/// `config_json` (JSON run configuration) and `checkpoint_dir` may be null
/// or must point to NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn emoe_train(config_json: *const c_char, checkpoint_dir: *const c_char) -> EmoeStatus {
    guard(|| {
        let cfg = config_arg(config_json, checkpoint_dir)?;
        cmd_train(&cfg)?;
        Ok(())
    })
}

/// Loads the bundle described by `config_json` from `checkpoint_dir`.
///
/// # Safety
/// String arguments may be null or must be NUL-terminated. `out` must be a
/// valid pointer; on success it receives a handle owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn emoe_bundle_load(
    config_json: *const c_char,
    checkpoint_dir: *const c_char,
    out: *mut *mut EmoeBundle,
) -> EmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(EmoeStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let cfg = config_arg(config_json, checkpoint_dir)?;
        let inner = load_bundle(&cfg)?;
        *out = Box::into_raw(Box::new(EmoeBundle { inner }));
        Ok(())
    })
}

/// Releases a bundle. Null is ignored.
///
/// # Safety
/// `bundle` must come from [`emoe_bundle_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn emoe_bundle_free(bundle: *mut EmoeBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Number of experts, or 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emoe_bundle_num_experts(bundle: *const EmoeBundle) -> u32 {
    bundle.as_ref().map_or(0, |b| b.inner.num_experts() as u32)
}

/// Number of values in one generated latent, or 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emoe_bundle_latent_len(bundle: *const EmoeBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.inner.weights().geometry.latent_len())
}

/// Denoiser evaluations performed by this bundle so far.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn emoe_bundle_forward_passes(bundle: *const EmoeBundle) -> u64 {
    bundle.as_ref().map_or(0, |b| b.inner.forward_passes())
}

/// Uncertainty at the first denoising step.
///
/// # Safety
/// `bundle` must be a live handle, `prompt` a NUL-terminated string,
/// `language_tag` null (English) or NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn emoe_estimate(
    bundle: *const EmoeBundle,
    prompt: *const c_char,
    language_tag: *const c_char,
    seed: u64,
    space: EmoeSpace,
    out: *mut EmoeEstimate,
) -> EmoeStatus {
    guard(|| {
        let b = bundle_arg(bundle)?;
        if out.is_null() {
            return Err(Failure(EmoeStatus::NullPointer, "out is null".into()));
        }
        let p = prompt_arg(prompt, language_tag)?;
        *out = b.estimate_uncertainty(&p, seed, space.into())?.into();
        Ok(())
    })
}

/// Uncertainty at the first step, then one aggregate rollout unless the
/// reported value reaches `threshold` (pass NaN for no threshold). On a
/// halt `*halted` is 1 and `image` is untouched; otherwise the final latent
/// is copied into `image`, which must hold `emoe_bundle_latent_len` values.
///
/// # Safety
/// As for [`emoe_estimate`]; `image` must point to `image_len` writable
/// doubles and `halted` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn emoe_fast(
    bundle: *const EmoeBundle,
    prompt: *const c_char,
    language_tag: *const c_char,
    seed: u64,
    space: EmoeSpace,
    threshold: f64,
    out: *mut EmoeEstimate,
    image: *mut f64,
    image_len: usize,
    halted: *mut i32,
) -> EmoeStatus {
    guard(|| {
        let b = bundle_arg(bundle)?;
        if out.is_null() || halted.is_null() || image.is_null() {
            return Err(Failure(EmoeStatus::NullPointer, "out, image or halted is null".into()));
        }
        let need = b.weights().geometry.latent_len();
        if image_len < need {
            return Err(Failure(
                EmoeStatus::BufferTooSmall,
                format!("image buffer holds {image_len} values, {need} needed"),
            ));
        }
        let p = prompt_arg(prompt, language_tag)?;
        let th = (!threshold.is_nan()).then_some(threshold);
        let (estimate, z0) = b.fast_emoe(&p, seed, space.into(), th)?;
        *out = estimate.into();
        match z0 {
            Some(z) => {
                std::slice::from_raw_parts_mut(image, need).copy_from_slice(z.data());
                *halted = 0;
            }
            None => *halted = 1,
        }
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// including the terminator, or 0 when there is no message.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn emoe_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn emoe_status_name(status: EmoeStatus) -> *const c_char {
    let s: &'static CStr = match status {
        EmoeStatus::Ok => c"ok",
        EmoeStatus::NullPointer => c"null pointer",
        EmoeStatus::InvalidUtf8 => c"invalid utf-8",
        EmoeStatus::InvalidArgument => c"invalid argument",
        EmoeStatus::Config => c"config error",
        EmoeStatus::Checkpoint => c"checkpoint error",
        EmoeStatus::Crc => c"checkpoint crc mismatch",
        EmoeStatus::Io => c"i/o error",
        EmoeStatus::Degenerate => c"degenerate ensemble",
        EmoeStatus::BufferTooSmall => c"buffer too small",
        EmoeStatus::Internal => c"internal error",
        EmoeStatus::Panic => c"panic",
    };
    s.as_ptr()
}
