//! C ABI over the cteg model: load checkpoints and datasets, evaluate, and
//! export gates, features and distance distributions as JSON strings.
//!
//! Every function returns a [`CtegStatus`]. On failure a message is available
//! from [`cteg_last_error`] until the next call on the same thread. Strings
//! handed out by this library must be released with [`cteg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cteg::corpus::{load_jsonl_with, read_jsonl, sample_episode, AnnotatedInstance, Dataset};
use cteg::eval::{evaluate, export_distances, export_gates, EpisodeSpec};
use cteg::featurize::featurize;
use cteg::model::Model;
use cteg::run::{select_split, Split};
use cteg::CtegError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    MalformedInput = 4,
    InvalidArgument = 5,
    Checkpoint = 6,
    WrongMode = 7,
    Panic = 8,
}

/// Loaded model. Opaque to C.
pub struct CtegModel(Model);

/// Loaded instances. Opaque to C.
pub struct CtegDataset(Dataset);

/// Which relations of a data file to keep, relative to the model's split.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtegSplit {
    Validation = 0,
    Train = 1,
    All = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CtegStatus, String);

impl From<CtegError> for Failure {
    fn from(e: CtegError) -> Self {
        let status = match &e {
            CtegError::Io { .. } => CtegStatus::Io,
            CtegError::MalformedJson { .. }
            | CtegError::InvalidInstance { .. }
            | CtegError::Instance(_)
            | CtegError::UnknownRelation { .. } => CtegStatus::MalformedInput,
            CtegError::Checkpoint(_) => CtegStatus::Checkpoint,
            CtegError::WrongMode { .. } => CtegStatus::WrongMode,
            _ => CtegStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Outcome) -> CtegStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CtegStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {message}"));
            CtegStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CtegStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(CtegStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn json_string<T: Serialize>(value: &T) -> Result<*mut c_char, Failure> {
    let s = serde_json::to_string(value).map_err(|e| Failure(CtegStatus::InvalidArgument, e.to_string()))?;
    Ok(CString::new(s).map_err(|e| Failure(CtegStatus::InvalidArgument, e.to_string()))?.into_raw())
}

fn parse_instance(json: &str) -> Result<AnnotatedInstance, Failure> {
    let ds = read_jsonl(json.trim().as_bytes(), None, usize::MAX)?;
    let mut all: Vec<AnnotatedInstance> = ds.instances().cloned().collect();
    if all.len() != 1 {
        return Err(Failure(
            CtegStatus::MalformedInput,
            format!("expected one instance, got {}", all.len()),
        ));
    }
    Ok(all.remove(0))
}

/// Null-terminated library version. Static; do not free.
#[no_mangle]
pub extern "C" fn cteg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread; do not free.
#[no_mangle]
pub extern "C" fn cteg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a valid C string and `model_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cteg_model_load(path: *const c_char, model_out: *mut *mut CtegModel) -> CtegStatus {
    guard(|| {
        let path = text(path, "path")?;
        let slot = out(model_out, "model_out")?;
        *slot = ptr::null_mut();
        let model = Model::load(Path::new(path))?;
        *slot = Box::into_raw(Box::new(CtegModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`cteg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cteg_model_free(model: *mut CtegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reads a JSONL file, keeping the relations selected by `split` relative to
/// the split recorded in `model`.
///
/// # Safety
/// Pointers must be valid; `model` must come from [`cteg_model_load`].
#[no_mangle]
pub unsafe extern "C" fn cteg_dataset_load(
    path: *const c_char,
    model: *const CtegModel,
    split: CtegSplit,
    dataset_out: *mut *mut CtegDataset,
) -> CtegStatus {
    guard(|| {
        let path = text(path, "path")?;
        let model = &borrow(model, "model")?.0;
        let slot = out(dataset_out, "dataset_out")?;
        *slot = ptr::null_mut();
        let corpus = load_jsonl_with(Path::new(path), None, model.config().max_length)?;
        let split = match split {
            CtegSplit::Validation => Split::Validation,
            CtegSplit::Train => Split::Train,
            CtegSplit::All => Split::All,
        };
        *slot = Box::into_raw(Box::new(CtegDataset(select_split(model, &corpus, split))));
        Ok(())
    })
}

/// Number of instances, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from [`cteg_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn cteg_dataset_len(dataset: *const CtegDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.num_instances())
}

/// # Safety
/// `dataset` must come from [`cteg_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cteg_dataset_free(dataset: *mut CtegDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Mean accuracy over `episodes` sampled N-way K-shot episodes, with its
/// standard error.
///
/// # Safety
/// Handles must be valid; `mean_out` and `stderr_out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cteg_evaluate(
    model: *const CtegModel,
    dataset: *const CtegDataset,
    n: usize,
    k: usize,
    q: usize,
    episodes: usize,
    seed: u64,
    mean_out: *mut f64,
    stderr_out: *mut f64,
) -> CtegStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let dataset = &borrow(dataset, "dataset")?.0;
        let mean_out = out(mean_out, "mean_out")?;
        let stderr_out = out(stderr_out, "stderr_out")?;
        let report = evaluate(model, dataset, EpisodeSpec { n, k, q, episodes, seed })?;
        *mean_out = report.mean;
        *stderr_out = report.stderr;
        Ok(())
    })
}

/// Per-token gate values of one instance given as a JSON object.
///
/// # Safety
/// `model` must be valid, `instance_json` a valid C string and `json_out`
/// writable. Free the result with [`cteg_string_free`].
#[no_mangle]
pub unsafe extern "C" fn cteg_gates_json(
    model: *const CtegModel,
    instance_json: *const c_char,
    json_out: *mut *mut c_char,
) -> CtegStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let json = text(instance_json, "instance_json")?;
        let slot = out(json_out, "json_out")?;
        *slot = ptr::null_mut();
        let mut inst = parse_instance(json)?;
        inst.tokens.iter_mut().for_each(|t| *t = t.to_lowercase());
        *slot = json_string(&export_gates(model, &inst)?)?;
        Ok(())
    })
}

/// Relative positions and syntactic tags of one instance.
///
/// # Safety
/// `instance_json` must be a valid C string and `json_out` writable. Free the
/// result with [`cteg_string_free`].
#[no_mangle]
pub unsafe extern "C" fn cteg_featurize_json(instance_json: *const c_char, json_out: *mut *mut c_char) -> CtegStatus {
    guard(|| {
        let json = text(instance_json, "instance_json")?;
        let slot = out(json_out, "json_out")?;
        *slot = ptr::null_mut();
        let inst = parse_instance(json)?;
        *slot = json_string(&featurize(&inst)?)?;
        Ok(())
    })
}

/// Distance distributions for query `query` of the episode drawn with
/// `episode_seed`.
///
/// # Safety
/// Handles must be valid and `json_out` writable. Free the result with
/// [`cteg_string_free`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cteg_distances_json(
    model: *const CtegModel,
    dataset: *const CtegDataset,
    n: usize,
    k: usize,
    q: usize,
    episode_seed: u64,
    query: usize,
    json_out: *mut *mut c_char,
) -> CtegStatus {
    guard(|| {
        let model = &borrow(model, "model")?.0;
        let dataset = &borrow(dataset, "dataset")?.0;
        let slot = out(json_out, "json_out")?;
        *slot = ptr::null_mut();
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let episode = sample_episode(dataset, n, k, q, &mut rng)?;
        *slot = json_string(&export_distances(model, &episode, query)?)?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn cteg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
