//! C ABI over the causal scene-graph library.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `_free`. Every fallible call returns an `SggStatus`; on failure the
//! message is available from `sgg_last_error` on the same thread. Strings
//! returned through out-parameters are released with `sgg_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sgg_causal::effects::{predict_dataset, unbiased_predict, EffectKind};
use sgg_causal::error::Error;
use sgg_causal::experiment::{self, ExperimentConfig, Splits};
use sgg_causal::io;
use sgg_causal::metrics::recall_at_k;
use sgg_causal::model::{CausalModel, Task};
use sgg_causal::synth::{Dataset, Split};
use sgg_causal::train::DebiasMode;
use sgg_causal::types::{RankedPredictions, SceneGraph};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SggStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Io = 6,
    Panic = 7,
}

/// A trained causal model.
pub struct SggModel(CausalModel);

/// One split of a synthetic dataset.
pub struct SggDataset(Dataset);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn status_of(e: &Error) -> SggStatus {
    match e.code() {
        "config" | "usage" => SggStatus::Config,
        "numeric" => SggStatus::Numeric,
        "io" => SggStatus::Io,
        _ => SggStatus::Data,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SggStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SggStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            SggStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(&msg);
            SggStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SggStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &'static str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail::Arg("output contains a nul byte".into()))?;
    // SAFETY: checked non-null by the caller of this helper.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, Fail> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Fail::Arg(format!("unknown split {s:?}"))),
    }
}

fn parse_task(s: &str) -> Result<Task, Fail> {
    match s.to_ascii_lowercase().as_str() {
        "predcls" => Ok(Task::PredCls),
        "sgcls" => Ok(Task::SgCls),
        _ => Err(Fail::Arg(format!("unknown task {s:?}"))),
    }
}

fn parse_config(json: Option<&str>) -> Result<ExperimentConfig, Fail> {
    let cfg: ExperimentConfig = match json {
        Some(j) => serde_json::from_str(j).map_err(|e| Fail::Lib(Error::config(e.to_string())))?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn sgg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sgg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sgg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates the splits of an experiment config (JSON, null for defaults)
/// and returns the requested one (`"train"`, `"val"` or `"test"`).
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgg_dataset_generate(
    config_json: *const c_char,
    split: *const c_char,
    out: *mut *mut SggDataset,
) -> SggStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let cfg = parse_config(opt_str_arg(config_json, "config_json")?)?;
        let split = parse_split(str_arg(split, "split")?)?;
        let Splits { train, val, test } = experiment::generate(&cfg)?;
        let d = match split {
            Split::Train => train,
            Split::Val => val,
            Split::Test => test,
        };
        *out = Box::into_raw(Box::new(SggDataset(d)));
        Ok(())
    })
}

/// Loads one split from a data directory written by `gen-data`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sgg_dataset_load(
    data_dir: *const c_char,
    split: *const c_char,
    out: *mut *mut SggDataset,
) -> SggStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let dir = str_arg(data_dir, "data_dir")?;
        let split = parse_split(str_arg(split, "split")?)?;
        let d = io::load_split(Path::new(dir), split)?;
        *out = Box::into_raw(Box::new(SggDataset(d)));
        Ok(())
    })
}

/// Number of images, 0 for a null handle.
///
/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sgg_dataset_len(d: *const SggDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.images.len())
}

/// # Safety
/// `d` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn sgg_dataset_free(d: *mut SggDataset) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Trains a model on `train` in a debias mode (`"none"`, `"focal"`,
/// `"reweight"`, `"resample"`, `"x2y_tr"`) with the training section of an
/// experiment config (JSON, null for defaults). `val` may be null.
///
/// # Safety
/// Handles must be live; strings null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sgg_model_train(
    train: *const SggDataset,
    val: *const SggDataset,
    config_json: *const c_char,
    mode: *const c_char,
    out: *mut *mut SggModel,
) -> SggStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let train = &handle(train, "train")?.0;
        let cfg = parse_config(opt_str_arg(config_json, "config_json")?)?;
        let mode: DebiasMode = str_arg(mode, "mode")?.parse()?;
        let splits = Splits {
            train: train.clone(),
            val: val
                .as_ref()
                .map(|v| v.0.clone())
                .unwrap_or_else(|| Dataset {
                    split: Split::Val,
                    images: Vec::new(),
                    ..train.clone()
                }),
            test: Dataset {
                split: Split::Test,
                images: Vec::new(),
                ..train.clone()
            },
        };
        let cfg = ExperimentConfig {
            world: train.world.clone(),
            ..cfg
        };
        let (model, _) = experiment::train_mode(&cfg, &splits, mode)?;
        *out = Box::into_raw(Box::new(SggModel(model)));
        Ok(())
    })
}

/// Loads a checkpoint JSON file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sgg_model_load(path: *const c_char, out: *mut *mut SggModel) -> SggStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let m: CausalModel = io::read_json(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SggModel(m)));
        Ok(())
    })
}

/// Writes a checkpoint JSON file.
///
/// # Safety
/// `m` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sgg_model_save(m: *const SggModel, path: *const c_char) -> SggStatus {
    guard(|| {
        let m = handle(m, "model")?;
        io::write_json(Path::new(str_arg(path, "path")?), &m.0)?;
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn sgg_model_free(m: *mut SggModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Ranked predictions of image `index` under an effect (`"tde"`,
/// `"baseline"`, ...) and task (`"predcls"`, `"sgcls"`), as JSON.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn sgg_predict_json(
    m: *const SggModel,
    d: *const SggDataset,
    index: usize,
    method: *const c_char,
    task: *const c_char,
    out_json: *mut *mut c_char,
) -> SggStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(Fail::Null("out_json"));
        }
        let m = handle(m, "model")?;
        let d = handle(d, "dataset")?;
        let kind: EffectKind = str_arg(method, "method")?.parse()?;
        let task = parse_task(str_arg(task, "task")?)?;
        let img =
            d.0.images
                .get(index)
                .ok_or_else(|| Fail::Arg(format!("image index {index} out of range")))?;
        let p = unbiased_predict(&m.0, img, task, kind)?;
        out_string(out_json, serde_json::to_string(&p).map_err(Error::from)?)
    })
}

/// Full evaluation report (recall, mean recall, zero-shot recall at
/// K = 20, 50, 100, graph-constrained) of an effect on a dataset, as JSON.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn sgg_evaluate_json(
    m: *const SggModel,
    d: *const SggDataset,
    method: *const c_char,
    task: *const c_char,
    out_json: *mut *mut c_char,
) -> SggStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(Fail::Null("out_json"));
        }
        let m = handle(m, "model")?;
        let d = &handle(d, "dataset")?.0;
        let kind: EffectKind = str_arg(method, "method")?.parse()?;
        let task = parse_task(str_arg(task, "task")?)?;
        let cfg = ExperimentConfig {
            world: d.world.clone(),
            ..ExperimentConfig::default()
        };
        let preds = predict_dataset(&m.0, d, task, kind)?;
        let label = kind.name().to_ascii_lowercase();
        let r = experiment::evaluate_predictions(&cfg, &preds, d, d, task, &label)?;
        out_string(out_json, serde_json::to_string(&r).map_err(Error::from)?)
    })
}

/// Recall@K of one ranked prediction list (JSON) against one ground-truth
/// scene graph (JSON): matched triplets into `out_hits`, ground-truth
/// triplets into `out_total`.
///
/// # Safety
/// Strings NUL-terminated; out-pointers writable.
#[no_mangle]
pub unsafe extern "C" fn sgg_recall_at_k(
    predictions_json: *const c_char,
    graph_json: *const c_char,
    k: usize,
    graph_constraint: bool,
    out_hits: *mut usize,
    out_total: *mut usize,
) -> SggStatus {
    guard(|| {
        if out_hits.is_null() || out_total.is_null() {
            return Err(Fail::Null("out_hits/out_total"));
        }
        let preds: RankedPredictions =
            serde_json::from_str(str_arg(predictions_json, "predictions_json")?)
                .map_err(|e| Error::data(format!("predictions: {e}")))?;
        let graph: SceneGraph = serde_json::from_str(str_arg(graph_json, "graph_json")?)
            .map_err(|e| Error::data(format!("graph: {e}")))?;
        let (hits, total) = recall_at_k(&preds, &graph, k, graph_constraint);
        *out_hits = hits;
        *out_total = total;
        Ok(())
    })
}
