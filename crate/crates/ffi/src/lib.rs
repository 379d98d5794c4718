//! C interface to the fingerprinting core.
//!
//! Every fallible function returns a [`SacStatus`]; on failure a message is
//! available from [`sac_last_error`] on the same thread. Objects are opaque
//! handles created by `sac_*_load`/`sac_*_new` and released with the matching
//! `sac_*_free`. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ndarray::Array2;
use sac::correlation::{correlation_matrix, fingerprint_distance, CorrelationMatrix, KernelSpec, OutputKind, OutputMatrix};
use sac::pipeline::{exit_code, run_pipeline, AuditConfig};
use sac::probekit::{load_probe_set, ProbeSet};
use sac::verdict::threshold_worst_irrelevant;
use sac::zoo::ZooModel;
use sac::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SacStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Integrity = 5,
    InvalidImage = 6,
    ProbeSetMismatch = 7,
    ShapeMismatch = 8,
    KernelMismatch = 9,
    InvalidOutputs = 10,
    EmptyPool = 11,
    InvalidConfig = 12,
    Numeric = 13,
    Other = 14,
    Panic = 15,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SacOutputKind {
    Probability = 0,
    Logit = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SacKernel {
    Cosine = 0,
    Rbf = 1,
}

/// A trained classifier.
pub struct SacModel(ZooModel);
/// An ordered probe set.
pub struct SacProbeSet(ProbeSet);
/// A model's outputs on a probe set.
pub struct SacOutputs(OutputMatrix);
/// A correlation-matrix fingerprint.
pub struct SacFingerprint(CorrelationMatrix);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SacStatus {
    match e {
        Error::Io { .. } => SacStatus::Io,
        Error::Parse(_) => SacStatus::Parse,
        Error::Integrity(_) => SacStatus::Integrity,
        Error::InvalidImage(_) | Error::InvalidQuality(_) | Error::InsufficientImages { .. } => SacStatus::InvalidImage,
        Error::ProbeSetMismatch(_) => SacStatus::ProbeSetMismatch,
        Error::ShapeMismatch(_) | Error::DimensionMismatch(..) | Error::InsufficientRows { .. } => {
            SacStatus::ShapeMismatch
        }
        Error::KernelMismatch(_) => SacStatus::KernelMismatch,
        Error::InvalidOutputs(_) => SacStatus::InvalidOutputs,
        Error::EmptyPool => SacStatus::EmptyPool,
        Error::InvalidConfig(_) | Error::InvalidFraction(_) | Error::InvalidBandwidth(_) => SacStatus::InvalidConfig,
        Error::DegenerateVector | Error::TrainingDiverged { .. } => SacStatus::Numeric,
        _ => SacStatus::Other,
    }
}

struct Fail(SacStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.kind()))
    }
}

fn null(what: &str) -> Fail {
    Fail(SacStatus::NullArgument, format!("{what} is null"))
}

/// Run `f`, turning errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SacStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SacStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(SacStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failure on this thread, or null. Valid until the next
/// call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_model_load(path: *const c_char, out: *mut *mut SacModel) -> SacStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, SacModel(ZooModel::load(path)?))
    })
}

/// # Safety
/// `model` must come from `sac_model_load` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sac_model_free(model: *mut SacModel) {
    release(model)
}

/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_probe_set_load(dir: *const c_char, out: *mut *mut SacProbeSet) -> SacStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        put(out, SacProbeSet(load_probe_set(dir)?))
    })
}

/// Number of probes, or 0 for a null handle.
///
/// # Safety
/// `probes` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn sac_probe_set_len(probes: *const SacProbeSet) -> usize {
    probes.as_ref().map_or(0, |p| p.0.len())
}

/// # Safety
/// `probes` must come from `sac_probe_set_load` (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sac_probe_set_free(probes: *mut SacProbeSet) {
    release(probes)
}

/// Query `model` on every probe.
///
/// # Safety
/// Handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_model_outputs(
    model: *const SacModel,
    probes: *const SacProbeSet,
    kind: SacOutputKind,
    out: *mut *mut SacOutputs,
) -> SacStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let probes = deref(probes, "probes")?;
        let kind = match kind {
            SacOutputKind::Probability => OutputKind::Probability,
            SacOutputKind::Logit => OutputKind::Logit,
        };
        put(out, SacOutputs(model.0.outputs(&probes.0, kind)?))
    })
}

/// Wrap outputs obtained elsewhere (for example from a remote suspect).
/// `values` holds `rows * cols` numbers in row-major order, one row per
/// probe in probe order; `rows` must equal the probe count.
///
/// # Safety
/// `values` must point to `rows * cols` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn sac_outputs_new(
    probes: *const SacProbeSet,
    values: *const f64,
    rows: usize,
    cols: usize,
    kind: SacOutputKind,
    out: *mut *mut SacOutputs,
) -> SacStatus {
    guard(|| {
        let probes = deref(probes, "probes")?;
        if values.is_null() {
            return Err(null("values"));
        }
        if rows != probes.0.len() {
            return Err(Fail(
                SacStatus::ShapeMismatch,
                format!("{rows} rows for {} probes", probes.0.len()),
            ));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(SacStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let data = std::slice::from_raw_parts(values, len).to_vec();
        let arr = Array2::from_shape_vec((rows, cols), data).map_err(|e| Fail(SacStatus::InvalidArgument, e.to_string()))?;
        let kind = match kind {
            SacOutputKind::Probability => OutputKind::Probability,
            SacOutputKind::Logit => OutputKind::Logit,
        };
        put(out, SacOutputs(OutputMatrix::new(arr, kind, probes.0.digest())?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_outputs_load(path: *const c_char, out: *mut *mut SacOutputs) -> SacStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, SacOutputs(OutputMatrix::load(path)?))
    })
}

/// # Safety
/// `outputs` must be live; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sac_outputs_save(outputs: *const SacOutputs, path: *const c_char) -> SacStatus {
    guard(|| {
        let outputs = deref(outputs, "outputs")?;
        Ok(outputs.0.save(path_arg(path, "path")?)?)
    })
}

/// # Safety
/// `outputs` must be live or null; `rows` and `cols` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sac_outputs_shape(outputs: *const SacOutputs, rows: *mut usize, cols: *mut usize) -> SacStatus {
    guard(|| {
        let outputs = deref(outputs, "outputs")?;
        if rows.is_null() || cols.is_null() {
            return Err(null("output pointer"));
        }
        *rows = outputs.0.rows();
        *cols = outputs.0.dims();
        Ok(())
    })
}

/// # Safety
/// `outputs` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sac_outputs_free(outputs: *mut SacOutputs) {
    release(outputs)
}

/// Correlation fingerprint of `outputs`. For the RBF kernel a `bandwidth`
/// of zero or less selects the median pairwise distance; it is ignored for
/// the cosine kernel.
///
/// # Safety
/// `outputs` must be live; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_fingerprint_new(
    outputs: *const SacOutputs,
    kernel: SacKernel,
    bandwidth: f64,
    out: *mut *mut SacFingerprint,
) -> SacStatus {
    guard(|| {
        let outputs = deref(outputs, "outputs")?;
        let spec = match kernel {
            SacKernel::Cosine => KernelSpec::Cosine,
            SacKernel::Rbf => KernelSpec::Rbf {
                bandwidth: (bandwidth > 0.0).then_some(bandwidth),
            },
        };
        put(out, SacFingerprint(correlation_matrix(&outputs.0, spec)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_fingerprint_load(path: *const c_char, out: *mut *mut SacFingerprint) -> SacStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, SacFingerprint(CorrelationMatrix::load(path)?))
    })
}

/// # Safety
/// `fp` must be live; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sac_fingerprint_save(fp: *const SacFingerprint, path: *const c_char) -> SacStatus {
    guard(|| {
        let fp = deref(fp, "fingerprint")?;
        Ok(fp.0.save(path_arg(path, "path")?)?)
    })
}

/// # Safety
/// `fp` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sac_fingerprint_free(fp: *mut SacFingerprint) {
    release(fp)
}

/// Mean absolute difference between two fingerprints on the same probes.
///
/// # Safety
/// Handles must be live; `distance` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_fingerprint_distance(
    source: *const SacFingerprint,
    suspect: *const SacFingerprint,
    distance: *mut f64,
) -> SacStatus {
    guard(|| {
        let source = deref(source, "source")?;
        let suspect = deref(suspect, "suspect")?;
        if distance.is_null() {
            return Err(null("distance"));
        }
        *distance = fingerprint_distance(&source.0, &suspect.0)?.value;
        Ok(())
    })
}

/// Smallest of `len` irrelevant-model distances.
///
/// # Safety
/// `distances` must point to `len` readable doubles; `threshold` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_threshold_worst_irrelevant(
    distances: *const f64,
    len: usize,
    threshold: *mut f64,
) -> SacStatus {
    guard(|| {
        if threshold.is_null() {
            return Err(null("threshold"));
        }
        let d = if len == 0 {
            &[][..]
        } else if distances.is_null() {
            return Err(null("distances"));
        } else {
            std::slice::from_raw_parts(distances, len)
        };
        *threshold = threshold_worst_irrelevant(d)?.value;
        Ok(())
    })
}

/// 1 when `distance <= threshold` (stolen), else 0.
#[no_mangle]
pub extern "C" fn sac_is_stolen(distance: f64, threshold: f64) -> i32 {
    i32::from(distance <= threshold)
}

/// Run a JSON audit config and write the report. `exit_code_out` receives 2 if
/// any suspect is stolen, else 0.
///
/// # Safety
/// Paths must be NUL-terminated strings; `exit_code_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sac_audit_run(
    config_path: *const c_char,
    report_path: *const c_char,
    exit_code_out: *mut i32,
) -> SacStatus {
    guard(|| {
        let config = AuditConfig::load(path_arg(config_path, "config_path")?)?;
        let report_path = path_arg(report_path, "report_path")?;
        if exit_code_out.is_null() {
            return Err(null("exit_code_out"));
        }
        let report = run_pipeline(&config)?;
        report.save(report_path)?;
        *exit_code_out = exit_code(&report);
        Ok(())
    })
}
