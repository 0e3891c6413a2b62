//! C ABI over the ISUP grader.
//!
//! A grader checkpoint is loaded into an opaque [`IsupGrader`] handle, which
//! grades either a raw RGB slide buffer or a slide listed in a tile manifest.
//! Every fallible call returns an [`IsupStatus`]; on failure the message is
//! available from [`isup_last_error_message`] on the same thread.
//!
//! The header in `include/isup_grading.h` is generated with
//! `cbindgen --config cbindgen.toml --output include/isup_grading.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use isup_grading::grade::{isup_from_gleason, GleasonGrade};
use isup_grading::grader::{Grader, SlidePrediction};
use isup_grading::nn::{Checkpoint, ParamSet};
use isup_grading::record::SlideRecord;
use isup_grading::report::LoadedManifest;
use isup_grading::tiling::{extract_patches, SlideImage, TissueThresholds, DEFAULT_BAG_SIZE};
use isup_grading::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsupStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// A file could not be read or decoded.
    Io = 3,
    /// The checkpoint is malformed or not a grader checkpoint.
    Checkpoint = 4,
    /// Arguments or data were rejected (sizes, labels, empty slides).
    InvalidInput = 5,
    /// The requested slide is not in the manifest.
    NotFound = 6,
    /// An internal error was caught at the boundary.
    Internal = 7,
}

/// Highest number of head outputs (the categorical head has six).
pub const ISUP_MAX_OUTPUTS: usize = 6;

/// Grade of one slide.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsupPrediction {
    /// ISUP grade in 0..=5.
    pub grade: u8,
    /// Probability that the slide is not benign.
    pub malignancy: f64,
    /// Sigmoid outputs of the ordinal head (5) or class probabilities (6);
    /// entries past `n_outputs` are zero.
    pub outputs: [f64; ISUP_MAX_OUTPUTS],
    pub n_outputs: usize,
    /// Distinct patches that entered the bag.
    pub n_patches: usize,
    /// Patch with the largest summed attention, in tiling order.
    pub top_patch_index: usize,
    /// Top-left corner of that patch in slide pixels.
    pub top_patch_x: u32,
    pub top_patch_y: u32,
    pub top_attention: f64,
}

/// Loaded grader; create with [`isup_grader_load`], release with
/// [`isup_grader_free`].
pub struct IsupGrader {
    model: Grader,
    params: ParamSet<f32>,
    bag_size: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(IsupStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Image { .. } | Error::Json { .. } => IsupStatus::Io,
            Error::Checkpoint(_) => IsupStatus::Checkpoint,
            Error::Stage { .. } | Error::NonFinite { .. } | Error::UndefinedMetric(_) => IsupStatus::Internal,
            _ => IsupStatus::InvalidInput,
        };
        Failure(status, error_chain(&e))
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        let next = s.to_string();
        if !msg.contains(&next) {
            msg.push_str(": ");
            msg.push_str(&next);
        }
        source = s.source();
    }
    msg
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, records any failure and converts panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IsupStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IsupStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let detail = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {detail}"));
            IsupStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(IsupStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(IsupStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn prediction(p: &SlidePrediction, slide: &SlideRecord) -> IsupPrediction {
    let mut outputs = [0.0; ISUP_MAX_OUTPUTS];
    let n = p.probs.len().min(ISUP_MAX_OUTPUTS);
    outputs[..n].copy_from_slice(&p.probs[..n]);
    let ranked = p.ranked_patches();
    let (top, attention) = ranked.first().copied().unwrap_or((0, 0.0));
    let patch = &slide.patches[top];
    IsupPrediction {
        grade: p.grade.value(),
        malignancy: p.malignancy,
        outputs,
        n_outputs: n,
        n_patches: ranked.len(),
        top_patch_index: top,
        top_patch_x: patch.x,
        top_patch_y: patch.y,
        top_attention: attention,
    }
}

/// Loads a grader checkpoint. `bag_size` 0 selects the default of 36.
///
/// # Safety
/// `checkpoint_path` must be a NUL-terminated string and `out` a valid
/// pointer; on success `*out` owns a handle for [`isup_grader_free`].
#[no_mangle]
pub unsafe extern "C" fn isup_grader_load(checkpoint_path: *const c_char, bag_size: usize, out: *mut *mut IsupGrader) -> IsupStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(checkpoint_path, "checkpoint_path")?;
        let (model, params) = Grader::from_checkpoint(&Checkpoint::load(Path::new(path))?)?;
        let bag_size = if bag_size == 0 { DEFAULT_BAG_SIZE } else { bag_size };
        *out = Box::into_raw(Box::new(IsupGrader { model, params, bag_size }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `grader` must come from [`isup_grader_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn isup_grader_free(grader: *mut IsupGrader) {
    if !grader.is_null() {
        drop(Box::from_raw(grader));
    }
}

/// Side of the square patches the grader expects, or 0 for a null handle.
///
/// # Safety
/// `grader` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn isup_grader_patch_size(grader: *const IsupGrader) -> usize {
    grader.as_ref().map(|g| g.model.spec().encoder.input_size).unwrap_or(0)
}

/// Tiles a row-major RGB slide of `width x height` pixels into patches and
/// grades it.
///
/// # Safety
/// `rgb` must point to `width * height * 3` readable bytes; `grader` and
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn isup_grader_predict_rgb(
    grader: *const IsupGrader,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut IsupPrediction,
) -> IsupStatus {
    guard(|| {
        let g = grader.as_ref().ok_or_else(|| null("grader"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure(IsupStatus::InvalidInput, format!("invalid slide size {width}x{height}")))?;
        let image = SlideImage {
            slide_id: "slide".into(),
            width,
            height,
            pixels: std::slice::from_raw_parts(rgb, len).to_vec(),
        };
        let patches = extract_patches(&image, g.model.spec().encoder.input_size, &TissueThresholds::default())?;
        let slide = SlideRecord::new("slide", GleasonGrade::Benign, GleasonGrade::Benign, patches)?;
        let p = g.model.predict_slide(&g.params, &slide, g.bag_size)?;
        *out = prediction(&p, &slide);
        Ok(())
    })
}

/// Grades the slide `slide_id` of a tile manifest (`tiles.jsonl` or a split
/// manifest). Paths inside the manifest resolve against its directory.
///
/// # Safety
/// String arguments must be NUL-terminated; `grader` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn isup_grader_predict_manifest(
    grader: *const IsupGrader,
    manifest_path: *const c_char,
    slide_id: *const c_char,
    out: *mut IsupPrediction,
) -> IsupStatus {
    guard(|| {
        let g = grader.as_ref().ok_or_else(|| null("grader"))?;
        let manifest = str_arg(manifest_path, "manifest_path")?;
        let id = str_arg(slide_id, "slide_id")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let loaded = LoadedManifest::open(Path::new(manifest))?;
        let slide = loaded
            .slides
            .iter()
            .find(|s| s.slide_id == id)
            .ok_or_else(|| Failure(IsupStatus::NotFound, format!("slide {id} is not in {manifest}")))?;
        let p = g.model.predict_slide(&g.params, slide, g.bag_size)?;
        *out = prediction(&p, slide);
        Ok(())
    })
}

/// Maps a Gleason pair (0 for benign, else 3..=5) to its ISUP grade.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn isup_grade_from_gleason(primary: u8, secondary: u8, out: *mut u8) -> IsupStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = GleasonGrade::try_from(primary)?;
        let s = GleasonGrade::try_from(secondary)?;
        *out = isup_from_gleason(p, s)?.value();
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn isup_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map(|c| c.as_ptr()).unwrap_or(ptr::null()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn isup_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
