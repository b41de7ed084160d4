//! C ABI over the koopql pipeline.
//!
//! Every fallible function returns a [`KqlStatus`]; on failure the message is
//! kept per thread and can be fetched with [`kql_last_error_message`].
//! Handles are opaque and must be released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use koopql::datastore::{check_pe, collect_dataset, CollectionSpec, Dataset, NoiseSpec, SampleLaw};
use koopql::embedding::{build_gamma, build_gamma_svd, EmbeddingMap};
use koopql::numerics::{Matrix, Vector};
use koopql::qlearn::{assemble_problem, run_qlearning, LearnOptions, LearnResult, OnlineController};
use koopql::systems::{CostSpec, Plant, PlantKey};
use koopql::{Error, ErrorClass};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KqlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Data = 3,
    Policy = 4,
    Numerical = 5,
    Panic = 6,
}

/// `Gamma` construction method for [`kql_embedding_build`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KqlGammaMethod {
    Exact = 0,
    Svd = 1,
}

pub struct KqlDataset(Dataset);
pub struct KqlEmbedding(EmbeddingMap);
pub struct KqlLearnResult(LearnResult);
pub struct KqlController(OnlineController);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> KqlStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KqlStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            KqlStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            match e.class() {
                ErrorClass::Input => KqlStatus::InvalidInput,
                ErrorClass::Data => KqlStatus::Data,
                ErrorClass::Policy => KqlStatus::Policy,
                ErrorClass::Numerical => KqlStatus::Numerical,
            }
        }
        Err(_) => {
            set_last_error("internal panic".into());
            KqlStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn read_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Core(Error::InvalidInput(format!("{what} is not UTF-8"))))
}

unsafe fn read_slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::Core(Error::InvalidInput("string contains NUL".into())))
}

fn plant_key(name: &str) -> Result<PlantKey, Failure> {
    match name {
        "paper_sec4" => Ok(PlantKey::PaperSec4),
        "scalar_stable" => Ok(PlantKey::ScalarStable),
        other => Err(Failure::Core(Error::InvalidInput(format!(
            "unknown plant {other:?} (lti_generic is not available through the C API)"
        )))),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kql_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the calling thread's last error message, or NULL if the last
/// call succeeded. Free with [`kql_string_free`].
#[no_mangle]
pub extern "C" fn kql_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kql_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Collects `nu` trajectories of `ell + 1` samples from a builtin plant with
/// inputs and initial states uniform on (-1, 1).
///
/// # Safety
/// `plant` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kql_dataset_collect(
    plant: *const c_char,
    nu: usize,
    ell: usize,
    seed: u64,
    output_sigma: f64,
    out: *mut *mut KqlDataset,
) -> KqlStatus {
    guard(|| {
        let key = plant_key(read_str(plant, "plant")?)?;
        let spec = CollectionSpec {
            nu,
            ell,
            input_law: SampleLaw::uniform(-1.0, 1.0),
            x0_law: SampleLaw::uniform(-1.0, 1.0),
            noise: NoiseSpec {
                output_sigma,
                state_sigma: 0.0,
            },
            seed,
        };
        let dataset = collect_dataset(&Plant::from_key(&key)?, &spec)?;
        write_out(out, KqlDataset(dataset))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kql_dataset_load(path: *const c_char, out: *mut *mut KqlDataset) -> KqlStatus {
    guard(|| {
        let dataset = Dataset::load(read_str(path, "path")?)?;
        write_out(out, KqlDataset(dataset))
    })
}

/// # Safety
/// `dataset` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kql_dataset_save(dataset: *const KqlDataset, path: *const c_char) -> KqlStatus {
    guard(|| {
        let d = deref(dataset, "dataset")?;
        d.0.save(read_str(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn kql_dataset_len(dataset: *const KqlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Rank test on the dataset's Hankel matrix.
///
/// # Safety
/// `dataset` must be a live handle; `is_pe` and `rank` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn kql_dataset_check_pe(
    dataset: *const KqlDataset,
    eta_bound: usize,
    is_pe: *mut bool,
    rank: *mut usize,
) -> KqlStatus {
    guard(|| {
        let d = deref(dataset, "dataset")?;
        let is_pe = deref_mut(is_pe, "is_pe")?;
        let rank = deref_mut(rank, "rank")?;
        let report = check_pe(&d.0, eta_bound, None)?;
        *is_pe = report.is_pe;
        *rank = report.rank;
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kql_dataset_free(dataset: *mut KqlDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kql_embedding_build(
    dataset: *const KqlDataset,
    eta_bound: usize,
    method: KqlGammaMethod,
    out: *mut *mut KqlEmbedding,
) -> KqlStatus {
    guard(|| {
        let d = deref(dataset, "dataset")?;
        let emap = match method {
            KqlGammaMethod::Exact => build_gamma(&d.0, eta_bound, None)?,
            KqlGammaMethod::Svd => build_gamma_svd(&d.0, eta_bound)?,
        };
        write_out(out, KqlEmbedding(emap))
    })
}

/// Dimension of the non-minimal state, 0 for NULL.
///
/// # Safety
/// `emap` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn kql_embedding_state_dim(emap: *const KqlEmbedding) -> usize {
    emap.as_ref().map_or(0, |e| e.0.state_dim())
}

/// JSON rendering; free the string with [`kql_string_free`].
///
/// # Safety
/// `emap` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kql_embedding_to_json(emap: *const KqlEmbedding, out: *mut *mut c_char) -> KqlStatus {
    guard(|| {
        let e = deref(emap, "emap")?;
        let out = deref_mut(out, "out")?;
        *out = to_c_string(e.0.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `emap` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kql_embedding_free(emap: *mut KqlEmbedding) {
    if !emap.is_null() {
        drop(Box::from_raw(emap));
    }
}

/// Runs policy iteration from `K = 0` with diagonal weights `q_diag` (length
/// `p`) and `r_diag` (length `m`).
///
/// # Safety
/// Handles must be live; `q_diag` and `r_diag` must point to `p` and `m`
/// readable doubles; `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn kql_learn(
    dataset: *const KqlDataset,
    emap: *const KqlEmbedding,
    q_diag: *const f64,
    p: usize,
    r_diag: *const f64,
    m: usize,
    max_iters: usize,
    gain_tol: f64,
    out: *mut *mut KqlLearnResult,
) -> KqlStatus {
    guard(|| {
        let d = deref(dataset, "dataset")?;
        let e = deref(emap, "emap")?;
        let q = Matrix::from_diagonal(&Vector::from_column_slice(read_slice(q_diag, p, "q_diag")?));
        let r = Matrix::from_diagonal(&Vector::from_column_slice(read_slice(r_diag, m, "r_diag")?));
        let cost = CostSpec::new(q, r)?;
        let k0 = Matrix::zeros(e.0.m, e.0.state_dim());
        let problem = assemble_problem(&d.0, &e.0, &cost, &k0, None)?;
        let result = run_qlearning(&problem, &LearnOptions { max_iters, gain_tol })?;
        write_out(out, KqlLearnResult(result))
    })
}

/// # Safety
/// `result` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn kql_learn_result_iterations(result: *const KqlLearnResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.iterations())
}

/// # Safety
/// `result` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn kql_learn_result_converged(result: *const KqlLearnResult) -> bool {
    result.as_ref().is_some_and(|r| r.0.converged)
}

/// Copies the final gain, row-major, into `buf` of length `len`
/// (which must equal `m * state_dim`).
///
/// # Safety
/// `result` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kql_learn_result_gain(result: *const KqlLearnResult, buf: *mut f64, len: usize) -> KqlStatus {
    guard(|| {
        let r = deref(result, "result")?;
        let k = &r.0.final_policy().k;
        if len != k.len() {
            return Err(Error::InvalidInput(format!("gain has {} entries, buffer holds {len}", k.len())).into());
        }
        if buf.is_null() {
            return Err(Failure::Null("buf"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, len);
        for (i, row) in k.row_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                dst[i * k.ncols() + j] = *v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kql_learn_result_to_json(result: *const KqlLearnResult, out: *mut *mut c_char) -> KqlStatus {
    guard(|| {
        let r = deref(result, "result")?;
        let out = deref_mut(out, "out")?;
        *out = to_c_string(r.0.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `result` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kql_learn_result_free(result: *mut KqlLearnResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Online controller for the final learned gain; the first `ell` actions are
/// zero while the window fills.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kql_controller_new(
    result: *const KqlLearnResult,
    emap: *const KqlEmbedding,
    out: *mut *mut KqlController,
) -> KqlStatus {
    guard(|| {
        let r = deref(result, "result")?;
        let e = deref(emap, "emap")?;
        let ctrl = OnlineController::with_zero_warmup(r.0.final_policy(), &e.0)?;
        write_out(out, KqlController(ctrl))
    })
}

/// Feeds the current output `y` (length `p`) and writes `u` (length `m`).
///
/// # Safety
/// `ctrl` must be a live handle, `y` readable for `p` doubles and `u`
/// writable for `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn kql_controller_step(
    ctrl: *mut KqlController,
    y: *const f64,
    p: usize,
    u: *mut f64,
    m: usize,
) -> KqlStatus {
    guard(|| {
        let c = deref_mut(ctrl, "ctrl")?;
        if m != c.0.input_dim() || p != c.0.output_dim() {
            return Err(Error::InvalidInput(format!(
                "controller maps R^{} to R^{}, buffers are {p} and {m}",
                c.0.output_dim(),
                c.0.input_dim()
            ))
            .into());
        }
        if u.is_null() {
            return Err(Failure::Null("u"));
        }
        let y = Vector::from_column_slice(read_slice(y, p, "y")?);
        c.0.observe(&y)?;
        let action = c.0.act()?;
        std::slice::from_raw_parts_mut(u, m).copy_from_slice(action.as_slice());
        Ok(())
    })
}

/// # Safety
/// `ctrl` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn kql_controller_free(ctrl: *mut KqlController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}
