//! C ABI over the `pmffnn` crate.
//!
//! Models are opaque [`PmffnnModel`] handles created by
//! [`pmffnn_model_from_config`] or [`pmffnn_model_load`] and released with
//! [`pmffnn_model_free`]. Every fallible call returns a [`PmffnnStatus`]; on
//! failure [`pmffnn_last_error`] describes the problem. Matrices are passed as
//! row-major `double` buffers.
//!
//! A handle must not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pmffnn::data::{DatasetTable, StandardizeStats, Targets};
use pmffnn::{model_file, ArchConfig, Error, Matrix, ModelGraph, TrainConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmffnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Data = 5,
    Io = 6,
    ModelFormat = 7,
    Divergence = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct PmffnnModel {
    model: ModelGraph,
    standardize: Option<StandardizeStats>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> PmffnnStatus {
    match err {
        Error::Shape { .. } => PmffnnStatus::Shape,
        Error::Domain { .. } => PmffnnStatus::InvalidArgument,
        Error::State(_) => PmffnnStatus::Internal,
        Error::Config { .. } => PmffnnStatus::Config,
        Error::Data(_) => PmffnnStatus::Data,
        Error::ModelFormat(_) => PmffnnStatus::ModelFormat,
        Error::Io { .. } => PmffnnStatus::Io,
        Error::Divergence { .. } => PmffnnStatus::Divergence,
    }
}

struct Failure(PmffnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PmffnnStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PmffnnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PmffnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PmffnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            PmffnnStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| invalid(format!("`{what}` is not UTF-8: {e}")))
}

unsafe fn model_mut<'a>(p: *mut PmffnnModel) -> Result<&'a mut PmffnnModel, Failure> {
    p.as_mut().ok_or_else(|| null("model"))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Matrix, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| invalid(format!("`{what}` is too large")))?;
    Ok(Matrix::from_vec(rows, cols, std::slice::from_raw_parts(p, n).to_vec())?)
}

unsafe fn train_config_arg(p: *const c_char) -> Result<TrainConfig, Failure> {
    if p.is_null() {
        return Ok(TrainConfig::default());
    }
    let text = str_arg(p, "train_config_json")?;
    serde_json::from_str(text).map_err(|e| Failure(PmffnnStatus::Config, format!("train config: {e}")))
}

unsafe fn write_out<T>(out: *mut T, value: T) {
    if !out.is_null() {
        *out = value;
    }
}

fn feature_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("f{i}")).collect()
}

/// Builds a freshly initialized model from an architecture config (JSON).
///
/// # Safety
/// `config_json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_from_config(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut PmffnnModel,
) -> PmffnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = ArchConfig::from_json_str(str_arg(config_json, "config_json")?)?;
        let model = ModelGraph::build(&cfg, seed)?;
        *out = Box::into_raw(Box::new(PmffnnModel {
            model,
            standardize: None,
        }));
        Ok(())
    })
}

/// Loads a model file written by [`pmffnn_model_save`] or the `pmffnn train` command.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_load(path: *const c_char, out: *mut *mut PmffnnModel) -> PmffnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let saved = model_file::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PmffnnModel {
            model: saved.model,
            standardize: saved.standardize,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_save(model: *const PmffnnModel, path: *const c_char) -> PmffnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        model_file::save(str_arg(path, "path")?, &m.model, m.standardize.as_ref())?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_free(model: *mut PmffnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_n_features(model: *const PmffnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_features())
}

/// Output width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_n_outputs(model: *const PmffnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_outputs())
}

/// Trainable parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_param_count(model: *const PmffnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.count_parameters().total)
}

/// Caps concurrently executing pathways; 1 runs them sequentially.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_set_threads(model: *mut PmffnnModel, threads: usize) -> PmffnnStatus {
    guard(|| {
        model_mut(model)?.model.set_threads(threads)?;
        Ok(())
    })
}

/// Inference-mode forward pass. `x` is `rows × cols`; `out` receives
/// `rows × n_outputs` values and `out_len` must be at least that. Stored input
/// standardization, if any, is applied first.
///
/// # Safety
/// `x` must hold `rows·cols` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_predict(
    model: *mut PmffnnModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> PmffnnStatus {
    guard(|| {
        let m = model_mut(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut x = matrix_arg(x, rows, cols, "x")?;
        if let Some(stats) = &m.standardize {
            x = stats.apply(&x)?;
        }
        let y = m.model.predict(&x)?;
        if out_len < y.len() {
            return Err(invalid(format!("out_len {out_len} < {}", y.len())));
        }
        std::slice::from_raw_parts_mut(out, y.len()).copy_from_slice(y.as_slice());
        Ok(())
    })
}

unsafe fn fit_table(
    m: &mut PmffnnModel,
    table: DatasetTable,
    train_config_json: *const c_char,
    final_loss: *mut f64,
) -> Result<(), Failure> {
    let tc = train_config_arg(train_config_json)?;
    let table = match &m.standardize {
        Some(stats) => {
            let x = stats.apply(&table.features)?;
            table.with_features(x)
        }
        None => table,
    };
    let report = pmffnn::fit(&mut m.model, &table, None, &tc)?;
    write_out(final_loss, report.last().map_or(f64::NAN, |e| e.train_loss));
    Ok(())
}

/// Trains a classification model in place. `labels` holds `rows` class
/// indices below `n_outputs`. `train_config_json` may be null for defaults.
/// The last epoch's training loss is written to `final_loss` when non-null.
///
/// # Safety
/// `x` must hold `rows·cols` doubles, `labels` `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_fit_classification(
    model: *mut PmffnnModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *const usize,
    train_config_json: *const c_char,
    final_loss: *mut f64,
) -> PmffnnStatus {
    guard(|| {
        let m = model_mut(model)?;
        let features = matrix_arg(x, rows, cols, "x")?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let labels = std::slice::from_raw_parts(labels, rows).to_vec();
        let n_classes = m.model.n_outputs();
        let table = DatasetTable::new(
            features,
            Targets::Classes { labels, n_classes },
            feature_names(cols),
            "label".into(),
        )?;
        fit_table(m, table, train_config_json, final_loss)
    })
}

/// Trains a regression model in place against `rows × y_cols` targets.
///
/// # Safety
/// `x` must hold `rows·cols` doubles, `y` `rows·y_cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn pmffnn_model_fit_regression(
    model: *mut PmffnnModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    y: *const f64,
    y_cols: usize,
    train_config_json: *const c_char,
    final_loss: *mut f64,
) -> PmffnnStatus {
    guard(|| {
        let m = model_mut(model)?;
        let features = matrix_arg(x, rows, cols, "x")?;
        let targets = matrix_arg(y, rows, y_cols, "y")?;
        let table = DatasetTable::new(features, Targets::Values(targets), feature_names(cols), "target".into())?;
        fit_table(m, table, train_config_json, final_loss)
    })
}

/// Message for the most recent failed call on this thread (empty after a
/// success). Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pmffnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn pmffnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
