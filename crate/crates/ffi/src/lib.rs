//! C ABI for embedding the pipeline in other languages.
//!
//! Opaque handles + integer status codes; string and array outputs are
//! caller-allocated or owned by the handle. The header is generated into
//! `include/stssl.h` at build time.
//!
//! Thread safety: handles are immutable after creation and may be shared
//! across threads; the last-error message is thread-local.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use stssl::config::{load_config, preset, ExperimentConfig};
use stssl::dataset::GeoTemporal;
use stssl::error::Error;
use stssl::eval::score_batch;
use stssl::model::{BackboneConfig, MetaMask, ParamSnapshot};
use stssl::train::{load_checkpoint, prepare, run_training};

/// Status codes returned by every fallible function.
#[repr(C)]
pub enum StsslStatus {
    Ok = 0,
    /// Invalid arguments, config, or file contents.
    UserError = 1,
    /// Training aborted on a non-finite loss.
    NumericalAbort = 2,
    /// Null pointer or UTF-8 violation at the boundary.
    BadPointer = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> StsslStatus {
    match err.exit_code() {
        2 => StsslStatus::NumericalAbort,
        _ => StsslStatus::UserError,
    }
}

/// Message for the most recent error on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stssl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.as_ptr())
            .unwrap_or(ptr::null())
    })
}

unsafe fn path_from(ptr_: *const c_char) -> Result<PathBuf, StsslStatus> {
    if ptr_.is_null() {
        set_error("null path".into());
        return Err(StsslStatus::BadPointer);
    }
    match CStr::from_ptr(ptr_).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8".into());
            Err(StsslStatus::BadPointer)
        }
    }
}

unsafe fn config_from(
    config_path: *const c_char,
    preset_name: *const c_char,
) -> Result<ExperimentConfig, StsslStatus> {
    if !config_path.is_null() {
        let path = path_from(config_path)?;
        return load_config(&path).map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        });
    }
    if preset_name.is_null() {
        set_error("either a config path or a preset name is required".into());
        return Err(StsslStatus::BadPointer);
    }
    let name = match CStr::from_ptr(preset_name).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("preset name is not valid UTF-8".into());
            return Err(StsslStatus::BadPointer);
        }
    };
    preset(name).ok_or_else(|| {
        set_error(format!("unknown preset {name:?}"));
        StsslStatus::UserError
    })
}

/// Generate the synthetic dataset described by a config file or preset into
/// `out_dir` (NULL uses the config's dataset directory).
///
/// # Safety
/// `config_path`/`preset_name` must be NULL or valid NUL-terminated strings;
/// at least one must be non-NULL. Same for `out_dir` when given.
#[no_mangle]
pub unsafe extern "C" fn stssl_generate_data(
    config_path: *const c_char,
    preset_name: *const c_char,
    out_dir: *const c_char,
) -> c_int {
    let config = match config_from(config_path, preset_name) {
        Ok(c) => c,
        Err(s) => return s as c_int,
    };
    let dir = if out_dir.is_null() {
        config.dataset.dir.clone()
    } else {
        match path_from(out_dir) {
            Ok(p) => p,
            Err(s) => return s as c_int,
        }
    };
    let world = match config.dataset.synthetic.as_ref() {
        Some(w) => w,
        None => {
            set_error("config has no synthetic dataset section".into());
            return StsslStatus::UserError as c_int;
        }
    };
    match stssl::dataset::generate_synthetic(world, &dir) {
        Ok(_) => StsslStatus::Ok as c_int,
        Err(e) => {
            set_error(e.to_string());
            status_of(&e) as c_int
        }
    }
}

/// Run training to completion, writing checkpoints and logs under `out_dir`.
///
/// # Safety
/// String arguments as in [`stssl_generate_data`]; `out_dir` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stssl_train(
    config_path: *const c_char,
    preset_name: *const c_char,
    out_dir: *const c_char,
) -> c_int {
    let config = match config_from(config_path, preset_name) {
        Ok(c) => c,
        Err(s) => return s as c_int,
    };
    let dir = match path_from(out_dir) {
        Ok(p) => p,
        Err(s) => return s as c_int,
    };
    let run = prepare(&config).and_then(|setup| run_training(&setup, Some(&dir), None));
    match run {
        Ok(_) => StsslStatus::Ok as c_int,
        Err(e) => {
            set_error(e.to_string());
            status_of(&e) as c_int
        }
    }
}

/// A loaded model snapshot (one network's EMA weights plus its config).
pub struct StsslModel {
    config: BackboneConfig,
    params: ParamSnapshot,
}

/// Load one role ("teacher" or "student") from a checkpoint as an inference
/// model. The experiment config (file or preset) must match the checkpoint.
/// Returns NULL on failure; see [`stssl_last_error_message`].
///
/// # Safety
/// String arguments must be NULL or valid NUL-terminated strings;
/// `checkpoint` and `role` are required.
#[no_mangle]
pub unsafe extern "C" fn stssl_model_load(
    config_path: *const c_char,
    preset_name: *const c_char,
    checkpoint: *const c_char,
    role: *const c_char,
) -> *mut StsslModel {
    let inner = || -> Result<StsslModel, StsslStatus> {
        let config = config_from(config_path, preset_name)?;
        let ckpt = path_from(checkpoint)?;
        if role.is_null() {
            set_error("null role".into());
            return Err(StsslStatus::BadPointer);
        }
        let role = CStr::from_ptr(role).to_string_lossy().to_string();
        let setup = prepare(&config).map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })?;
        let (state, _) = load_checkpoint(&ckpt, Some(&setup)).map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })?;
        match role.as_str() {
            "teacher" => Ok(StsslModel {
                config: state.teacher.config.clone(),
                params: state.teacher.ema.shadow.clone(),
            }),
            "student" => match &state.student {
                Some(slot) => Ok(StsslModel {
                    config: slot.config.clone(),
                    params: slot.ema.shadow.clone(),
                }),
                None => {
                    set_error("checkpoint carries no student model".into());
                    Err(StsslStatus::UserError)
                }
            },
            other => {
                set_error(format!("unknown role {other:?} (teacher, student)"));
                Err(StsslStatus::UserError)
            }
        }
    };
    match inner() {
        Ok(m) => Box::into_raw(Box::new(m)),
        Err(_) => ptr::null_mut(),
    }
}

/// # Safety
/// `model` must be a pointer from [`stssl_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stssl_model_free(model: *mut StsslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model scores, or -1 on NULL.
///
/// # Safety
/// `model` must be NULL or a live pointer from [`stssl_model_load`].
#[no_mangle]
pub unsafe extern "C" fn stssl_model_num_classes(model: *const StsslModel) -> c_int {
    if model.is_null() {
        return -1;
    }
    (*model).config.num_classes as c_int
}

/// Expected square image side length in pixels, or -1 on NULL.
///
/// # Safety
/// `model` must be NULL or a live pointer from [`stssl_model_load`].
#[no_mangle]
pub unsafe extern "C" fn stssl_model_image_size(model: *const StsslModel) -> c_int {
    if model.is_null() {
        return -1;
    }
    (*model).config.image_size as c_int
}

/// Score one image. `pixels` is row-major H×W×3 in [0, 1] with H = W =
/// `stssl_model_image_size`. Metadata is read by teacher models and ignored
/// by students; pass `day_of_year < 0` for "no acquisition time". Writes
/// `num_classes` probabilities into `out_probs`.
///
/// # Safety
/// `model` must be live; `pixels` must point to `size*size*3` doubles;
/// `out_probs` must have room for `num_classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn stssl_model_predict(
    model: *const StsslModel,
    pixels: *const c_double,
    latitude: c_double,
    longitude: c_double,
    day_of_year: c_double,
    out_probs: *mut c_double,
) -> c_int {
    if model.is_null() || pixels.is_null() || out_probs.is_null() {
        set_error("null pointer".into());
        return StsslStatus::BadPointer as c_int;
    }
    let m = &*model;
    let s = m.config.image_size;
    let len = s * s * 3;
    let data = std::slice::from_raw_parts(pixels, len);
    let images =
        match ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, s, s, 3]), data.to_vec()) {
            Ok(a) => a,
            Err(e) => {
                set_error(e.to_string());
                return StsslStatus::UserError as c_int;
            }
        };
    let meta = GeoTemporal {
        latitude,
        longitude,
        day_of_year: (day_of_year >= 0.0).then_some(day_of_year),
    };
    if let Err(e) = meta.validate() {
        set_error(e.to_string());
        return StsslStatus::UserError as c_int;
    }
    match score_batch(&m.config, &m.params, images, Some(&[meta]), &MetaMask::default()) {
        Ok(probs) => {
            let out = std::slice::from_raw_parts_mut(out_probs, m.config.num_classes);
            for (o, v) in out.iter_mut().zip(probs.row(0)) {
                *o = *v;
            }
            StsslStatus::Ok as c_int
        }
        Err(e) => {
            set_error(e.to_string());
            status_of(&e) as c_int
        }
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn stssl_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}
