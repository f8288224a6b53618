//! C ABI over the facemotion face model and inference pipeline.
//!
//! Every fallible function returns an [`FmStatus`]. On failure the message is
//! kept per thread and can be read with [`fm_last_error_message`]. Handles are
//! opaque; each `*_new`/`*_open` has a matching `*_free` that accepts NULL.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use facemotion::app::{InferenceModels, Pipeline, RunConfig};
use facemotion::face_model::{FaceModel, MotionFrame, MotionSequence, PoseAngles};
use facemotion::motion_lm::{GenerationParams, MAX_MOTION_TOKENS};
use facemotion::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    MissingStage = 5,
    CorruptCheckpoint = 6,
    EmptyPrompt = 7,
    TooLong = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Internal = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("interior NULs removed")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> FmStatus {
    match e {
        Error::Io { .. } => FmStatus::Io,
        Error::Config(_) | Error::Json(_) => FmStatus::Config,
        Error::MissingStage(_) => FmStatus::MissingStage,
        Error::Corrupt { .. } | Error::Checksum(_) | Error::MissingTensor(_) | Error::UnsupportedVersion { .. } | Error::BadMagic(_) => {
            FmStatus::CorruptCheckpoint
        }
        Error::EmptyPrompt => FmStatus::EmptyPrompt,
        Error::TooLong { .. } => FmStatus::TooLong,
        Error::NonFinite(_) => FmStatus::Internal,
        _ => FmStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (FmStatus, String)>) -> FmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside facemotion");
            FmStatus::Panic
        }
    }
}

fn lift(e: Error) -> (FmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FmStatus, String) {
    (FmStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FmStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (FmStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (FmStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies `src` into `(dst, cap)`; `*written` always receives the full length
/// so callers can size a retry.
unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize, written: *mut usize) -> Result<(), (FmStatus, String)> {
    if !written.is_null() {
        *written = src.len();
    }
    if src.len() > cap {
        return Err((FmStatus::BufferTooSmall, format!("need room for {} values, got {cap}", src.len())));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next facemotion call on the same thread.
#[no_mangle]
pub extern "C" fn fm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Frees a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opaque face model handle.
pub struct FmFaceModel(FaceModel);

/// Builds the synthetic face model for `seed`.
#[no_mangle]
pub unsafe extern "C" fn fm_face_model_new(seed: u64, vertex_count: usize, expr_dim: usize, out: *mut *mut FmFaceModel) -> FmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = FaceModel::synthetic(seed, vertex_count, expr_dim).map_err(lift)?;
        *out = Box::into_raw(Box::new(FmFaceModel(model)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fm_face_model_free(model: *mut FmFaceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vertex count V, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn fm_face_model_vertex_count(model: *const FmFaceModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.vertex_count())
}

/// Expression dimension E, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn fm_face_model_expr_dim(model: *const FmFaceModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.expr_dim())
}

/// Posed mesh for one frame, written as V×3 doubles into `vertices`.
#[no_mangle]
pub unsafe extern "C" fn fm_face_model_decode(
    model: *const FmFaceModel,
    expr: *const f64,
    expr_len: usize,
    yaw: f64,
    pitch: f64,
    roll: f64,
    vertices: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> FmStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let expr = slice_arg(expr, expr_len, "expr")?;
        let frame = MotionFrame { expr: expr.to_vec(), pose: PoseAngles::new(yaw, pitch, roll) };
        let mesh = model.0.decode_mesh(&frame).map_err(lift)?;
        let flat: Vec<f64> = mesh.vertices.iter().flatten().copied().collect();
        copy_out(&flat, vertices, capacity, written)
    })
}

/// Opaque handle over loaded checkpoints.
pub struct FmEngine(InferenceModels);

/// Loads the VQ-VAE, Motion2Language and Language2Motion checkpoints named by
/// the run configuration at `config_path` (NULL uses the defaults).
#[no_mangle]
pub unsafe extern "C" fn fm_engine_open(config_path: *const c_char, out: *mut *mut FmEngine) -> FmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(Path::new(str_arg(config_path, "config_path")?)).map_err(lift)?
        };
        let models = Pipeline::new(cfg).and_then(|p| p.load_inference()).map_err(lift)?;
        *out = Box::into_raw(Box::new(FmEngine(models)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fm_engine_free(engine: *mut FmEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Opaque generated motion: geometry tokens plus decoded frames.
pub struct FmMotion {
    tokens: Vec<usize>,
    motion: MotionSequence,
}

/// Generates motion for `prompt`. `temperature` 0 is greedy; `top_k` 0
/// disables filtering.
#[no_mangle]
pub unsafe extern "C" fn fm_engine_generate(
    engine: *const FmEngine,
    prompt: *const c_char,
    seed: u64,
    temperature: f64,
    top_k: usize,
    out: *mut *mut FmMotion,
) -> FmStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let prompt = str_arg(prompt, "prompt")?;
        let params = GenerationParams { temperature, top_k, seed, max_new_tokens: MAX_MOTION_TOKENS };
        let (tokens, motion) = engine.0.generate(prompt, &params).map_err(lift)?;
        *out = Box::into_raw(Box::new(FmMotion { tokens, motion }));
        Ok(())
    })
}

/// Answers `question` (NULL for the default) about a token sequence. The
/// returned string must be released with [`fm_string_free`].
#[no_mangle]
pub unsafe extern "C" fn fm_engine_describe(
    engine: *const FmEngine,
    tokens: *const usize,
    len: usize,
    question: *const c_char,
    out: *mut *mut c_char,
) -> FmStatus {
    guard(|| {
        let engine = engine.as_ref().ok_or_else(|| null("engine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let tokens = slice_arg(tokens, len, "tokens")?;
        if tokens.is_empty() {
            return Err((FmStatus::InvalidArgument, "no tokens".into()));
        }
        let question = if question.is_null() { None } else { Some(str_arg(question, "question")?) };
        let (text, _) = engine.0.describe_tokens(tokens, question, &GenerationParams::greedy()).map_err(lift)?;
        *out = CString::new(text).map_err(|_| (FmStatus::Internal, "description contains NUL".into()))?.into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fm_motion_free(motion: *mut FmMotion) {
    if !motion.is_null() {
        drop(Box::from_raw(motion));
    }
}

#[no_mangle]
pub unsafe extern "C" fn fm_motion_frame_count(motion: *const FmMotion) -> usize {
    motion.as_ref().map_or(0, |m| m.motion.len())
}

/// Values per frame: E expression coefficients then yaw, pitch, roll.
#[no_mangle]
pub unsafe extern "C" fn fm_motion_frame_width(motion: *const FmMotion) -> usize {
    motion.as_ref().map_or(0, |m| m.motion.expr_dim() + 3)
}

#[no_mangle]
pub unsafe extern "C" fn fm_motion_tokens(motion: *const FmMotion, buf: *mut usize, capacity: usize, written: *mut usize) -> FmStatus {
    guard(|| {
        let m = motion.as_ref().ok_or_else(|| null("motion"))?;
        copy_out(&m.tokens, buf, capacity, written)
    })
}

/// Row-major frames, `fm_motion_frame_width` values each.
#[no_mangle]
pub unsafe extern "C" fn fm_motion_frames(motion: *const FmMotion, buf: *mut f64, capacity: usize, written: *mut usize) -> FmStatus {
    guard(|| {
        let m = motion.as_ref().ok_or_else(|| null("motion"))?;
        copy_out(&m.motion.to_rows(), buf, capacity, written)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = fm_last_error_message();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
    }

    #[test]
    fn decode_matches_core() {
        unsafe {
            let mut h = ptr::null_mut();
            assert_eq!(fm_face_model_new(3, 32, 16, &mut h), FmStatus::Ok);
            assert_eq!(fm_face_model_vertex_count(h), 32);
            let expr = [0.5; 16];
            let mut out = vec![0.0; 96];
            let mut n = 0;
            assert_eq!(fm_face_model_decode(h, expr.as_ptr(), 16, 0.1, -0.2, 0.3, out.as_mut_ptr(), out.len(), &mut n), FmStatus::Ok);
            assert_eq!(n, 96);
            let core = FaceModel::synthetic(3, 32, 16).unwrap();
            let mesh = core.decode_mesh(&MotionFrame { expr: expr.to_vec(), pose: PoseAngles::new(0.1, -0.2, 0.3) }).unwrap();
            let flat: Vec<f64> = mesh.vertices.iter().flatten().copied().collect();
            assert_eq!(out, flat);
            fm_face_model_free(h);
        }
    }

    #[test]
    fn small_buffer_reports_needed_length() {
        unsafe {
            let mut h = ptr::null_mut();
            assert_eq!(fm_face_model_new(3, 16, 16, &mut h), FmStatus::Ok);
            let expr = [0.0; 16];
            let mut out = [0.0; 4];
            let mut n = 0;
            let s = fm_face_model_decode(h, expr.as_ptr(), 16, 0.0, 0.0, 0.0, out.as_mut_ptr(), 4, &mut n);
            assert_eq!(s, FmStatus::BufferTooSmall);
            assert_eq!(n, 48);
            fm_face_model_free(h);
        }
    }

    #[test]
    fn errors_set_message_and_success_clears_it() {
        unsafe {
            let mut h = ptr::null_mut();
            assert_eq!(fm_face_model_new(3, 4, 8, &mut h), FmStatus::InvalidArgument);
            assert!(h.is_null());
            assert!(last_error().contains("expr_dim"));
            assert_eq!(fm_face_model_new(3, 16, 16, &mut h), FmStatus::Ok);
            assert!(fm_last_error_message().is_null());
            fm_face_model_free(h);
        }
    }

    #[test]
    fn null_handles_are_rejected() {
        unsafe {
            assert_eq!(fm_face_model_new(3, 8, 16, ptr::null_mut()), FmStatus::NullPointer);
            let mut n = 0;
            assert_eq!(fm_face_model_decode(ptr::null(), ptr::null(), 0, 0.0, 0.0, 0.0, ptr::null_mut(), 0, &mut n), FmStatus::NullPointer);
            assert_eq!(fm_face_model_vertex_count(ptr::null()), 0);
            assert_eq!(fm_motion_frame_count(ptr::null()), 0);
            fm_face_model_free(ptr::null_mut());
            fm_engine_free(ptr::null_mut());
            fm_motion_free(ptr::null_mut());
            fm_string_free(ptr::null_mut());
        }
    }

    #[test]
    fn version_is_the_crate_version() {
        let v = unsafe { CStr::from_ptr(fm_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
