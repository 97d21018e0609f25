//! C ABI over the drkf engine.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`*_generate` and
//! released with the matching `*_free`. Every fallible function returns a
//! [`DrkfStatus`]; on failure a message is available from
//! [`drkf_last_error`] on the same thread until the next failing call.
//! Panics never cross the boundary: they are reported as
//! `DRKF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use drkf::cli::RunConfig;
use drkf::dataio::{gen_synthetic, load_fixture, write_fixture, Dataset, SyntheticSpec};
use drkf::train::{evaluate, export_embeddings, load_checkpoint, save_checkpoint, DrkfModel, Trainer};
use drkf::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrkfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Config = 5,
    Checkpoint = 6,
    Shape = 7,
    NonFinite = 8,
    Panic = 9,
}

/// A loaded or generated dataset.
pub struct DrkfDataset {
    inner: Dataset,
}

/// A model together with its optimizer state and batch schedule.
pub struct DrkfTrainer {
    inner: Trainer,
    eval_threads: usize,
}

/// Loss components of one training step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DrkfLosses {
    pub l_mse: f64,
    pub l_kld: f64,
    pub l_a: f64,
    pub l_mi_s: f64,
    pub l_mi_t: f64,
    pub l_mi_cross: f64,
    pub l_c: f64,
    pub l_f: f64,
    pub l_b: f64,
    pub total: f64,
}

/// Summary metrics of an evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DrkfMetrics {
    pub acc_unweighted: f64,
    pub acc_weighted: f64,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub weighted_f1: f64,
    pub ed_pair_accuracy: f64,
    pub samples: u64,
}

/// Settings for [`drkf_dataset_generate`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DrkfSyntheticSpec {
    pub classes: usize,
    pub d_z: usize,
    pub records: usize,
    pub speech_len: usize,
    pub text_len: usize,
    pub separation: f64,
    pub inconsistency_rate: f64,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DrkfStatus {
    match e {
        Error::Shape { .. } => DrkfStatus::Shape,
        Error::InvalidArgument(_) => DrkfStatus::InvalidArgument,
        Error::NonFinite(_) => DrkfStatus::NonFinite,
        Error::Fixture { .. } | Error::Data(_) | Error::Json(_) => DrkfStatus::Data,
        Error::Config(_) => DrkfStatus::Config,
        Error::Checkpoint(_) => DrkfStatus::Checkpoint,
        Error::Io { .. } => DrkfStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DrkfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DrkfStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed as `{what}`"));
            DrkfStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            DrkfStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
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
            DrkfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("`{what}` is not valid UTF-8")))
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

/// Message of the most recent failure on this thread, or NULL. The string
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn drkf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn drkf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a JSONL fixture (metadata read from `<path>.meta.json`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drkf_dataset_load(path: *const c_char, out: *mut *mut DrkfDataset) -> DrkfStatus {
    guard(|| {
        let out = obj_mut(out, "out")?;
        let path = str_arg(path, "path")?;
        let inner = load_fixture(path)?;
        *out = Box::into_raw(Box::new(DrkfDataset { inner }));
        Ok(())
    })
}

/// Draws a synthetic dataset.
///
/// # Safety
/// `spec` must point to a valid spec; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drkf_dataset_generate(
    spec: *const DrkfSyntheticSpec,
    out: *mut *mut DrkfDataset,
) -> DrkfStatus {
    guard(|| {
        let out = obj_mut(out, "out")?;
        let s = obj(spec, "spec")?;
        let data = gen_synthetic(&SyntheticSpec {
            classes: s.classes,
            d_z: s.d_z,
            records: s.records,
            m: s.speech_len,
            n: s.text_len,
            separation: s.separation,
            inconsistency_rate: s.inconsistency_rate,
            seed: s.seed,
        })?;
        *out = Box::into_raw(Box::new(DrkfDataset { inner: data.dataset }));
        Ok(())
    })
}

/// Writes the dataset as a JSONL fixture plus `<path>.meta.json`.
///
/// # Safety
/// `dataset` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn drkf_dataset_save(dataset: *const DrkfDataset, path: *const c_char) -> DrkfStatus {
    guard(|| {
        let d = obj(dataset, "dataset")?;
        write_fixture(&d.inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of records, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn drkf_dataset_len(dataset: *const DrkfDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// Releases a dataset. NULL is ignored.
///
/// # Safety
/// `dataset` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drkf_dataset_free(dataset: *mut DrkfDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Creates a freshly initialized trainer. `config_json` is a flat JSON
/// object with run settings (same keys as the CLI config file) or NULL for
/// defaults.
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drkf_trainer_new(config_json: *const c_char, out: *mut *mut DrkfTrainer) -> DrkfStatus {
    guard(|| {
        let out = obj_mut(out, "out")?;
        let cfg: RunConfig = if config_json.is_null() {
            RunConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        let model = DrkfModel::new(cfg.model(), cfg.seed)?;
        let inner = Trainer::new(model, cfg.optimizer(), cfg.weights(), cfg.batch_size, cfg.seed)?;
        *out = Box::into_raw(Box::new(DrkfTrainer {
            inner,
            eval_threads: cfg.eval_threads,
        }));
        Ok(())
    })
}

/// Runs the next scheduled training step on `dataset`. `losses` may be NULL.
///
/// # Safety
/// Handles must come from this library; `losses` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn drkf_trainer_step(
    trainer: *mut DrkfTrainer,
    dataset: *const DrkfDataset,
    losses: *mut DrkfLosses,
) -> DrkfStatus {
    guard(|| {
        let t = obj_mut(trainer, "trainer")?;
        let d = obj(dataset, "dataset")?;
        let l = t.inner.step(&d.inner)?;
        if let Some(out) = losses.as_mut() {
            *out = DrkfLosses {
                l_mse: l.l_mse,
                l_kld: l.l_kld,
                l_a: l.l_a,
                l_mi_s: l.l_mi_s,
                l_mi_t: l.l_mi_t,
                l_mi_cross: l.l_mi_cross,
                l_c: l.l_c,
                l_f: l.l_f,
                l_b: l.l_b,
                total: l.total,
            };
        }
        Ok(())
    })
}

/// Optimizer steps taken so far, or 0 for NULL.
///
/// # Safety
/// `trainer` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn drkf_trainer_steps_done(trainer: *const DrkfTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.inner.steps_done())
}

/// Evaluates both heads on `dataset`.
///
/// # Safety
/// Handles must come from this library; `metrics` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drkf_trainer_evaluate(
    trainer: *const DrkfTrainer,
    dataset: *const DrkfDataset,
    metrics: *mut DrkfMetrics,
) -> DrkfStatus {
    guard(|| {
        let t = obj(trainer, "trainer")?;
        let d = obj(dataset, "dataset")?;
        let out = obj_mut(metrics, "metrics")?;
        let e = evaluate(&t.inner.model, &d.inner, t.inner.batch_size, t.eval_threads)?;
        let m = &e.metrics;
        *out = DrkfMetrics {
            acc_unweighted: m.acc_unweighted,
            acc_weighted: m.acc_weighted,
            precision: m.precision,
            recall: m.recall,
            micro_f1: m.micro_f1,
            weighted_f1: m.weighted_f1,
            ed_pair_accuracy: e.ed_pair_accuracy,
            samples: m.samples(),
        };
        Ok(())
    })
}

/// Writes parameters and optimizer state to `path`.
///
/// # Safety
/// `trainer` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn drkf_trainer_save(trainer: *const DrkfTrainer, path: *const c_char) -> DrkfStatus {
    guard(|| {
        let t = obj(trainer, "trainer")?;
        save_checkpoint(PathBuf::from(str_arg(path, "path")?), &t.inner.model, &t.inner.optim)?;
        Ok(())
    })
}

/// Restores parameters and optimizer state from `path`. On failure the
/// trainer is unchanged.
///
/// # Safety
/// `trainer` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn drkf_trainer_load(trainer: *mut DrkfTrainer, path: *const c_char) -> DrkfStatus {
    guard(|| {
        let t = obj_mut(trainer, "trainer")?;
        let path = str_arg(path, "path")?;
        let inner = &mut t.inner;
        load_checkpoint(path, &mut inner.model, &mut inner.optim)?;
        Ok(())
    })
}

/// Writes the fused vector of every record of `dataset` as CSV.
///
/// # Safety
/// Handles must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn drkf_trainer_export_embeddings(
    trainer: *const DrkfTrainer,
    dataset: *const DrkfDataset,
    path: *const c_char,
) -> DrkfStatus {
    guard(|| {
        let t = obj(trainer, "trainer")?;
        let d = obj(dataset, "dataset")?;
        export_embeddings(&t.inner.model, &d.inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Releases a trainer. NULL is ignored.
///
/// # Safety
/// `trainer` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drkf_trainer_free(trainer: *mut DrkfTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}
