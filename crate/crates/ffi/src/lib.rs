//! C ABI over the poisoning harness.
//!
//! Handles are opaque pointers owned by this library; every fallible call
//! returns an [`HcarsStatus`] and leaves a human-readable message for
//! [`hcars_last_error_message`] on failure. Out-parameters are only written
//! on `HCARS_STATUS_OK`.
//!
//! The generated header lives at `include/hcars.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use hcars::attack::{run_hcars, write_fake_archive, AttackConfig};
use hcars::data::{load_interactions, DataFormat, InteractionMatrix};
use hcars::explainer::{explain, read_cf_archive, ExplainerConfig};
use hcars::harness::hit_ratio;
use hcars::surrogate::{train_surrogate, SurrogateModel, SurrogateTrainConfig};
use hcars::target::{train_target, NcfModel, TargetTrainConfig};
use hcars::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcarsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    IoError = 4,
    NumericError = 5,
    /// No counterfactual explanation exists for the queried pair.
    Infeasible = 6,
    PreconditionFailed = 7,
    BufferTooSmall = 8,
    InternalError = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> HcarsStatus {
    match err {
        Error::Shape(_) | Error::Size(_) | Error::Config(_) | Error::IdRange(_) => {
            HcarsStatus::InvalidArgument
        }
        Error::Parse { .. } | Error::EmptyDataset(_) | Error::Serialization(_) => {
            HcarsStatus::ParseError
        }
        Error::Domain(_) | Error::Numeric(_) => HcarsStatus::NumericError,
        Error::Precondition(_) => HcarsStatus::PreconditionFailed,
        Error::InfeasibleExplanation(_) => HcarsStatus::Infeasible,
        Error::Io(_) => HcarsStatus::IoError,
    }
}

fn fail(err: Error) -> HcarsStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn null_fail(what: &str) -> HcarsStatus {
    set_error(&format!("{what} must not be null"));
    HcarsStatus::NullPointer
}

unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, HcarsStatus> {
    if ptr.is_null() {
        return Err(null_fail(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        HcarsStatus::InvalidArgument
    })
}

/// Opaque interaction-matrix handle.
pub struct HcarsMatrix {
    inner: InteractionMatrix,
}

/// Opaque victim-model handle.
pub struct HcarsTarget {
    inner: NcfModel,
}

/// Opaque surrogate-model handle.
pub struct HcarsSurrogate {
    inner: SurrogateModel,
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn hcars_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing this thread's most recent error; valid until the next
/// failing call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn hcars_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads and binarizes an interaction dataset.
/// `format` is "movielens-tsv", "pair-csv", or "pair-csv-header".
#[no_mangle]
pub unsafe extern "C" fn hcars_matrix_load(
    path: *const c_char,
    format: *const c_char,
    out: *mut *mut HcarsMatrix,
) -> HcarsStatus {
    if out.is_null() {
        return null_fail("out");
    }
    let path = match cstr(path, "path") {
        Ok(s) => PathBuf::from(s),
        Err(st) => return st,
    };
    let format = match cstr(format, "format") {
        Ok("movielens-tsv") => DataFormat::MovielensTsv,
        Ok("pair-csv") => DataFormat::PairCsv { header: false },
        Ok("pair-csv-header") => DataFormat::PairCsv { header: true },
        Ok(other) => {
            set_error(&format!("unknown format {other:?}"));
            return HcarsStatus::InvalidArgument;
        }
        Err(st) => return st,
    };
    match load_interactions(&path, format) {
        Ok(raw) => {
            let (matrix, _) = InteractionMatrix::from_binarized(&raw);
            *out = Box::into_raw(Box::new(HcarsMatrix { inner: matrix }));
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn hcars_matrix_dims(
    matrix: *const HcarsMatrix,
    users: *mut u32,
    items: *mut u32,
    interactions: *mut u64,
) -> HcarsStatus {
    let Some(matrix) = matrix.as_ref() else {
        return null_fail("matrix");
    };
    if !users.is_null() {
        *users = matrix.inner.num_users() as u32;
    }
    if !items.is_null() {
        *items = matrix.inner.num_items() as u32;
    }
    if !interactions.is_null() {
        *interactions = matrix.inner.num_interactions() as u64;
    }
    HcarsStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn hcars_matrix_free(matrix: *mut HcarsMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Trains the NCF victim on a matrix.
#[no_mangle]
pub unsafe extern "C" fn hcars_target_train(
    train: *const HcarsMatrix,
    embedding_dim: u32,
    epochs: u32,
    lr: f64,
    negatives_per_positive: u32,
    batch_size: u32,
    seed: u64,
    out: *mut *mut HcarsTarget,
) -> HcarsStatus {
    let Some(train) = train.as_ref() else {
        return null_fail("train");
    };
    if out.is_null() {
        return null_fail("out");
    }
    let cfg = TargetTrainConfig {
        embedding_dim: embedding_dim as usize,
        epochs: epochs as usize,
        lr,
        negatives_per_positive: negatives_per_positive as usize,
        batch_size: batch_size as usize,
        seed,
    };
    match train_target(&train.inner, &cfg) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(HcarsTarget { inner: model }));
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn hcars_target_save(
    model: *const HcarsTarget,
    path: *const c_char,
) -> HcarsStatus {
    let Some(model) = model.as_ref() else {
        return null_fail("model");
    };
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    match model.inner.save(path) {
        Ok(()) => HcarsStatus::Ok,
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn hcars_target_load(
    path: *const c_char,
    out: *mut *mut HcarsTarget,
) -> HcarsStatus {
    if out.is_null() {
        return null_fail("out");
    }
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    match NcfModel::load(path) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(HcarsTarget { inner: model }));
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Preference score in (0,1).
#[no_mangle]
pub unsafe extern "C" fn hcars_target_score(
    model: *const HcarsTarget,
    user: u32,
    item: u32,
    out: *mut f64,
) -> HcarsStatus {
    let Some(model) = model.as_ref() else {
        return null_fail("model");
    };
    if out.is_null() {
        return null_fail("out");
    }
    match model.inner.score(user, item) {
        Ok(s) => {
            *out = s;
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Top-k recommendation ids for a user. `out_items` must hold `k` entries;
/// `out_len` receives the actual count (shorter when few candidates exist).
#[no_mangle]
pub unsafe extern "C" fn hcars_target_top_k(
    model: *const HcarsTarget,
    history: *const HcarsMatrix,
    user: u32,
    k: u32,
    out_items: *mut u32,
    out_len: *mut u32,
) -> HcarsStatus {
    let Some(model) = model.as_ref() else {
        return null_fail("model");
    };
    let Some(history) = history.as_ref() else {
        return null_fail("history");
    };
    if out_items.is_null() || out_len.is_null() {
        return null_fail("out_items/out_len");
    }
    match model.inner.top_k(user, k as usize, &history.inner) {
        Ok(ranked) => {
            for (i, &item) in ranked.items.iter().enumerate() {
                *out_items.add(i) = item;
            }
            *out_len = ranked.items.len() as u32;
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn hcars_target_free(model: *mut HcarsTarget) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fraction of users whose top-k contains at least one of `targets`.
#[no_mangle]
pub unsafe extern "C" fn hcars_hit_ratio(
    model: *const HcarsTarget,
    history: *const HcarsMatrix,
    targets: *const u32,
    num_targets: u32,
    k: u32,
    out: *mut f64,
) -> HcarsStatus {
    let Some(model) = model.as_ref() else {
        return null_fail("model");
    };
    let Some(history) = history.as_ref() else {
        return null_fail("history");
    };
    if targets.is_null() || out.is_null() {
        return null_fail("targets/out");
    }
    let targets = std::slice::from_raw_parts(targets, num_targets as usize);
    let users: Vec<u32> = (0..history.inner.num_users() as u32).collect();
    match hit_ratio(&model.inner, &users, targets, k as usize, &history.inner) {
        Ok(hr) => {
            *out = hr;
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Greedy counterfactual explanation for a recommended (user, target) pair:
/// the removed history items are written to `out_items` (up to `capacity`).
/// Fails with `HCARS_STATUS_INFEASIBLE` when no subset evicts the target.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hcars_explain(
    model: *const HcarsTarget,
    history: *const HcarsMatrix,
    user: u32,
    target: u32,
    k: u32,
    seed: u64,
    out_items: *mut u32,
    capacity: u32,
    out_len: *mut u32,
) -> HcarsStatus {
    let Some(model) = model.as_ref() else {
        return null_fail("model");
    };
    let Some(history) = history.as_ref() else {
        return null_fail("history");
    };
    if out_items.is_null() || out_len.is_null() {
        return null_fail("out_items/out_len");
    }
    let cfg = ExplainerConfig {
        seed,
        ..ExplainerConfig::default()
    };
    match explain(
        &model.inner,
        user,
        target,
        k as usize,
        &history.inner,
        &cfg,
    ) {
        Ok(cf) => {
            if cf.removed.len() > capacity as usize {
                set_error(&format!(
                    "explanation needs {} slots, buffer has {capacity}",
                    cf.removed.len()
                ));
                return HcarsStatus::BufferTooSmall;
            }
            for (i, &item) in cf.removed.iter().enumerate() {
                *out_items.add(i) = item;
            }
            *out_len = cf.removed.len() as u32;
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Trains the neural-logic surrogate from an observed matrix plus an
/// optional counterfactual archive (newline-delimited JSON; pass null for
/// none).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hcars_surrogate_train(
    observed: *const HcarsMatrix,
    cf_archive_path: *const c_char,
    lambda_cf: f64,
    lambda_reg: f64,
    embedding_dim: u32,
    hidden_dim: u32,
    epochs: u32,
    seed: u64,
    out: *mut *mut HcarsSurrogate,
) -> HcarsStatus {
    let Some(observed) = observed.as_ref() else {
        return null_fail("observed");
    };
    if out.is_null() {
        return null_fail("out");
    }
    let cfs = if cf_archive_path.is_null() {
        Vec::new()
    } else {
        let path = match cstr(cf_archive_path, "cf_archive_path") {
            Ok(s) => s,
            Err(st) => return st,
        };
        match read_cf_archive(path) {
            Ok(cfs) => cfs,
            Err(e) => return fail(e),
        }
    };
    let cfg = SurrogateTrainConfig {
        lambda_cf,
        lambda_reg,
        embedding_dim: embedding_dim as usize,
        hidden_dim: hidden_dim as usize,
        epochs: epochs as usize,
        seed,
        ..SurrogateTrainConfig::default()
    };
    match train_surrogate(&observed.inner, &cfs, &cfg) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(HcarsSurrogate { inner: model }));
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Horn-clause truth score of an (unrated) item for a user.
#[no_mangle]
pub unsafe extern "C" fn hcars_surrogate_score(
    model: *const HcarsSurrogate,
    user: u32,
    item: u32,
    out: *mut f64,
) -> HcarsStatus {
    let Some(model) = model.as_ref() else {
        return null_fail("model");
    };
    if out.is_null() {
        return null_fail("out");
    }
    match model.inner.score(user, item) {
        Ok(s) => {
            *out = s;
            HcarsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn hcars_surrogate_free(model: *mut HcarsSurrogate) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the full poisoning loop against a trained surrogate and writes the
/// crafted fake profiles as a newline-delimited JSON archive.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hcars_attack_run(
    surrogate: *const HcarsSurrogate,
    observed: *const HcarsMatrix,
    targets: *const u32,
    num_targets: u32,
    budget: u32,
    profile_size: u32,
    seed: u64,
    out_archive_path: *const c_char,
) -> HcarsStatus {
    let Some(surrogate) = surrogate.as_ref() else {
        return null_fail("surrogate");
    };
    let Some(observed) = observed.as_ref() else {
        return null_fail("observed");
    };
    if targets.is_null() {
        return null_fail("targets");
    }
    let path = match cstr(out_archive_path, "out_archive_path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let targets = std::slice::from_raw_parts(targets, num_targets as usize).to_vec();
    let cfg = AttackConfig {
        targets,
        budget: budget as usize,
        profile_size: profile_size as usize,
        seed,
        ..AttackConfig::default()
    };
    match run_hcars(&surrogate.inner, &observed.inner, &cfg)
        .and_then(|fakes| write_fake_archive(path, &fakes))
    {
        Ok(()) => HcarsStatus::Ok,
        Err(e) => fail(e),
    }
}
