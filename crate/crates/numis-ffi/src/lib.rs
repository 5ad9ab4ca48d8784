//! C ABI over the pipeline: opaque config handles, status codes, and a
//! thread-local last-error message. The generated header lives in
//! `include/numis.h`; a hand-maintained copy is kept in sync as a fallback
//! for builds without cbindgen.
//!
//! Conventions: every function returns a `NumisStatus`; results come back
//! through out-pointers; any non-`Ok` status leaves a human-readable message
//! retrievable with `numis_last_error` until the next call on that thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use numis::pipeline::{run_stage, PipelineConfig, PipelineError, Stage, StageOutcome};
use numis::segment::{self, SegmentationOutcome, SegmentationParams};

/// Status codes mirroring the CLI's exit-code taxonomy.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NumisStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Malformed UTF-8, unknown stage name, or invalid configuration.
    InvalidArgument = 2,
    /// Missing or unreadable data, including unmet stage prerequisites.
    DataError = 3,
    /// Non-finite loss or other numeric breakdown.
    NumericError = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap_or_default());
}

fn fail(status: NumisStatus, msg: &str) -> NumisStatus {
    set_error(msg);
    status
}

fn from_pipeline_error(e: &PipelineError) -> NumisStatus {
    let status = match e {
        PipelineError::Usage(_) => NumisStatus::InvalidArgument,
        PipelineError::Data(_) => NumisStatus::DataError,
        PipelineError::Numeric(_) => NumisStatus::NumericError,
    };
    fail(status, &e.to_string())
}

/// Last error message for this thread, or an empty string. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn numis_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, NumisStatus> {
    if p.is_null() {
        return Err(fail(NumisStatus::NullArgument, &format!("{} is null", what)));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(
            NumisStatus::InvalidArgument,
            &format!("{} is not valid UTF-8", what),
        )),
    }
}

/// Opaque pipeline configuration handle.
pub struct NumisConfig {
    inner: PipelineConfig,
}

/// Loads a pipeline config from a TOML file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
/// A handle stored through `out` must be released with `numis_config_free`.
#[no_mangle]
pub unsafe extern "C" fn numis_config_load(
    path: *const c_char,
    out: *mut *mut NumisConfig,
) -> NumisStatus {
    if out.is_null() {
        return fail(NumisStatus::NullArgument, "out is null");
    }
    *out = ptr::null_mut();
    let path = match path_arg(path, "path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match PipelineConfig::load(path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(NumisConfig { inner }));
            NumisStatus::Ok
        }
        Err(e) => from_pipeline_error(&e),
    }
}

/// Overrides the config seed (the CLI's `--seed`).
///
/// # Safety
/// `config` must be a live handle from `numis_config_load`.
#[no_mangle]
pub unsafe extern "C" fn numis_config_set_seed(
    config: *mut NumisConfig,
    seed: u64,
) -> NumisStatus {
    let Some(config) = config.as_mut() else {
        return fail(NumisStatus::NullArgument, "config is null");
    };
    config.inner.seed = seed;
    NumisStatus::Ok
}

/// Redirects all stage artifacts under a different root directory.
///
/// # Safety
/// `config` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn numis_config_set_output_root(
    config: *mut NumisConfig,
    dir: *const c_char,
) -> NumisStatus {
    let Some(config) = config.as_mut() else {
        return fail(NumisStatus::NullArgument, "config is null");
    };
    let dir = match path_arg(dir, "dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    config.inner.output_root = PathBuf::from(dir);
    NumisStatus::Ok
}

/// Releases a config handle. Null is a no-op.
///
/// # Safety
/// `config` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn numis_config_free(config: *mut NumisConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs one pipeline stage by its CLI name (e.g. "prepare", "train-vit").
/// Sets `*ran` to 1 when work was done, 0 when the stage was already up to
/// date (pass `force` != 0 to rerun regardless).
///
/// # Safety
/// `config` must be a live handle; `stage` a NUL-terminated string; `ran`
/// may be null when the caller does not care.
#[no_mangle]
pub unsafe extern "C" fn numis_run_stage(
    config: *const NumisConfig,
    stage: *const c_char,
    force: i32,
    ran: *mut i32,
) -> NumisStatus {
    let Some(config) = config.as_ref() else {
        return fail(NumisStatus::NullArgument, "config is null");
    };
    if stage.is_null() {
        return fail(NumisStatus::NullArgument, "stage is null");
    }
    let name = match CStr::from_ptr(stage).to_str() {
        Ok(s) => s,
        Err(_) => return fail(NumisStatus::InvalidArgument, "stage is not valid UTF-8"),
    };
    let Some(stage) = Stage::from_name(name) else {
        return fail(
            NumisStatus::InvalidArgument,
            &format!("unknown stage '{}'", name),
        );
    };
    match run_stage(&config.inner, stage, force != 0) {
        Ok(outcome) => {
            if !ran.is_null() {
                *ran = i32::from(matches!(outcome, StageOutcome::Ran(_)));
            }
            NumisStatus::Ok
        }
        Err(e) => from_pipeline_error(&e),
    }
}

/// Segments a single image file with default parameters, writing the reverse
/// crop to `output_png` when accepted. `*accepted` is set to 1 on acceptance,
/// 0 on rejection (the cause is available via `numis_last_error`).
///
/// # Safety
/// Both paths must be NUL-terminated strings; `accepted` must be valid.
#[no_mangle]
pub unsafe extern "C" fn numis_segment_file(
    input_path: *const c_char,
    output_png: *const c_char,
    accepted: *mut i32,
) -> NumisStatus {
    if accepted.is_null() {
        return fail(NumisStatus::NullArgument, "accepted is null");
    }
    *accepted = 0;
    let input = match path_arg(input_path, "input_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let output = match path_arg(output_png, "output_png") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let img = match image::open(input) {
        Ok(i) => i.to_rgb8(),
        Err(e) => return fail(NumisStatus::DataError, &format!("cannot read image: {}", e)),
    };
    match segment::segment(&img, &SegmentationParams::default()) {
        Ok(SegmentationOutcome::Accepted { crop, .. }) => match crop.save(output) {
            Ok(()) => {
                *accepted = 1;
                NumisStatus::Ok
            }
            Err(e) => fail(NumisStatus::DataError, &format!("cannot write crop: {}", e)),
        },
        Ok(SegmentationOutcome::Rejected(cause)) => {
            set_error(&format!("rejected: {}", cause));
            NumisStatus::Ok
        }
        Err(e) => fail(NumisStatus::DataError, &e.to_string()),
    }
}
